#pragma once

#include <cgf/tensor.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

// Reference implementations kept deliberately free of any code path shared
// with ops.hpp. Plain nested loops, index arithmetic written out in place.

namespace cgf::oracle {

/// Brute-force grouped cross-correlation with zero padding.
template <typename Scalar>
Tensor4<Scalar> conv2d_naive(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p) {
  if (p.stride < 1 || p.groups < 1) {
    throw std::invalid_argument("conv2d_naive: stride and groups must be >= 1");
  }
  if (x.c != p.c_in || p.c_in % p.groups != 0 || p.c_out % p.groups != 0) {
    throw std::invalid_argument("conv2d_naive: channel/group mismatch (input " +
                                std::to_string(x.c) + ", c_in " + std::to_string(p.c_in) +
                                ", c_out " + std::to_string(p.c_out) + ", groups " +
                                std::to_string(p.groups) + ")");
  }
  const int cpg = p.c_in / p.groups;
  const int opg = p.c_out / p.groups;
  const int ho = (x.h + 2 * p.padding - p.k_h) / p.stride + 1;
  const int wo = (x.w + 2 * p.padding - p.k_w) / p.stride + 1;
  if (ho < 1 || wo < 1) {
    throw std::invalid_argument("conv2d_naive: output dims collapse");
  }

  Tensor4<Scalar> y(x.n, p.c_out, ho, wo);
  for (int i = 0; i < x.n; ++i) {
    for (int oc = 0; oc < p.c_out; ++oc) {
      const int g = oc / opg;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
          double acc = 0.0;
          for (int ic = 0; ic < cpg; ++ic) {
            for (int r = 0; r < p.k_h; ++r) {
              const int ih = oh * p.stride - p.padding + r;
              if (ih < 0 || ih >= x.h) continue;
              for (int s = 0; s < p.k_w; ++s) {
                const int iw = ow * p.stride - p.padding + s;
                if (iw < 0 || iw >= x.w) continue;
                const Scalar xv =
                    x.data[((static_cast<Eigen::Index>(i) * x.c + g * cpg + ic) * x.h + ih) * x.w +
                           iw];
                const Scalar wv =
                    p.kernel[((static_cast<Eigen::Index>(oc) * cpg + ic) * p.k_h + r) * p.k_w + s];
                acc += static_cast<double>(xv) * static_cast<double>(wv);
              }
            }
          }
          if (p.bias.size() > 0) acc += static_cast<double>(p.bias[oc]);
          y.data[((static_cast<Eigen::Index>(i) * p.c_out + oc) * ho + oh) * wo + ow] =
              static_cast<Scalar>(acc);
        }
      }
    }
  }
  return y;
}

/// Full softmax attention over token rows, O(N^2 d) loops with long double
/// accumulation. q, k, v hold one token per row.
template <typename Scalar>
MatX<Scalar> dense_attention_naive(const MatX<Scalar>& q, const MatX<Scalar>& k,
                                   const MatX<Scalar>& v, double scale) {
  const Eigen::Index n = q.rows();
  if (k.rows() != n || v.rows() != n || q.cols() != k.cols()) {
    throw std::invalid_argument("dense_attention_naive: inconsistent token matrices");
  }
  const Eigen::Index d = q.cols();
  const Eigen::Index dv = v.cols();

  MatX<Scalar> out(n, dv);
  std::vector<long double> logits(static_cast<std::size_t>(n));
  for (Eigen::Index a = 0; a < n; ++a) {
    long double row_max = -std::numeric_limits<long double>::infinity();
    for (Eigen::Index b = 0; b < n; ++b) {
      long double dot = 0.0L;
      for (Eigen::Index e = 0; e < d; ++e) {
        dot += static_cast<long double>(q(a, e)) * static_cast<long double>(k(b, e));
      }
      logits[static_cast<std::size_t>(b)] = dot * static_cast<long double>(scale);
      row_max = std::max(row_max, logits[static_cast<std::size_t>(b)]);
    }
    long double denom = 0.0L;
    for (Eigen::Index b = 0; b < n; ++b) {
      denom += std::exp(logits[static_cast<std::size_t>(b)] - row_max);
    }
    for (Eigen::Index e = 0; e < dv; ++e) {
      long double acc = 0.0L;
      for (Eigen::Index b = 0; b < n; ++b) {
        const long double alpha = std::exp(logits[static_cast<std::size_t>(b)] - row_max) / denom;
        acc += alpha * static_cast<long double>(v(b, e));
      }
      out(a, e) = static_cast<Scalar>(acc);
    }
  }
  return out;
}

}  // namespace cgf::oracle
