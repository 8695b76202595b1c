#pragma once

#include <cgf/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace cgf {

inline std::pair<int, int> conv_output_dims(int h, int w, int k_h, int k_w, int stride,
                                            int padding) {
  const int ho = (h + 2 * padding - k_h) / stride + 1;
  const int wo = (w + 2 * padding - k_w) / stride + 1;
  return {ho, wo};
}

namespace detail {

// Gathers one (n, group) slice into a (c_in/g * k_h * k_w) x (ho * wo) patch matrix.
template <typename Scalar>
void im2col_group(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p, int item, int group,
                  int ho, int wo, MatX<Scalar>& cols) {
  const int cpg = p.c_in_per_group();
  const Scalar* base = x.data.data() + x.index(item, group * cpg, 0, 0);
  for (int ic = 0; ic < cpg; ++ic) {
    const Scalar* plane = base + static_cast<Eigen::Index>(ic) * x.h * x.w;
    for (int r = 0; r < p.k_h; ++r) {
      for (int s = 0; s < p.k_w; ++s) {
        Scalar* row = cols.data() + static_cast<Eigen::Index>((ic * p.k_h + r) * p.k_w + s) *
                                        cols.cols();
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * p.stride - p.padding + r;
          Scalar* dst = row + static_cast<Eigen::Index>(oh) * wo;
          if (ih < 0 || ih >= x.h) {
            std::fill(dst, dst + wo, Scalar(0));
            continue;
          }
          const Scalar* src_row = plane + static_cast<Eigen::Index>(ih) * x.w;
          if (p.stride == 1) {
            const int lo = std::max(0, p.padding - s);
            const int hi = std::min(wo, x.w + p.padding - s);
            std::fill(dst, dst + std::min(lo, wo), Scalar(0));
            if (hi > lo) std::copy(src_row + (lo + s - p.padding), src_row + (hi + s - p.padding), dst + lo);
            if (hi < wo) std::fill(dst + std::max(hi, 0), dst + wo, Scalar(0));
          } else {
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * p.stride - p.padding + s;
              dst[ow] = (iw < 0 || iw >= x.w) ? Scalar(0) : src_row[iw];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding, optional bias, grouped channels.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p) {
  p.validate();
  if (x.c != p.c_in) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.c) +
                                " channels, kernel expects " + std::to_string(p.c_in) +
                                " (input " + x.shape_str() + ")");
  }
  const auto [ho, wo] = conv_output_dims(x.h, x.w, p.k_h, p.k_w, p.stride, p.padding);
  if (ho < 1 || wo < 1) {
    throw std::invalid_argument("conv2d: output dims " + std::to_string(ho) + "x" +
                                std::to_string(wo) + " collapse for input " + x.shape_str() +
                                " with k=" + std::to_string(p.k_h) + "x" + std::to_string(p.k_w) +
                                " stride=" + std::to_string(p.stride) +
                                " pad=" + std::to_string(p.padding));
  }

  Tensor4<Scalar> y(x.n, p.c_out, ho, wo);
  const int cpg = p.c_in_per_group();
  const int opg = p.c_out_per_group();
  const Eigen::Index howo = static_cast<Eigen::Index>(ho) * wo;
  const Eigen::Index kk = static_cast<Eigen::Index>(cpg) * p.k_h * p.k_w;

  const bool pointwise = (p.k_h == 1 && p.k_w == 1 && p.stride == 1 && p.padding == 0);
  MatX<Scalar> cols;
  if (!pointwise) cols.resize(kk, howo);

  for (int i = 0; i < x.n; ++i) {
    MapMat<Scalar> out = y.item(i);
    for (int g = 0; g < p.groups; ++g) {
      CMapMat<Scalar> wg(p.kernel.data() + static_cast<Eigen::Index>(g) * opg * kk, opg, kk);
      if (pointwise) {
        CMapMat<Scalar> xg(x.data.data() + x.index(i, g * cpg, 0, 0), cpg, howo);
        out.middleRows(g * opg, opg).noalias() = wg * xg;
      } else {
        detail::im2col_group(x, p, i, g, ho, wo, cols);
        out.middleRows(g * opg, opg).noalias() = wg * cols;
      }
      if (p.has_bias()) {
        out.middleRows(g * opg, opg).colwise() += p.bias.segment(g * opg, opg);
      }
    }
  }
  return y;
}

/// Per-channel 3x3 spatial filtering; requires groups == c_in == c_out.
template <typename Scalar>
Tensor4<Scalar> depthwise_conv2d(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p) {
  if (p.groups != x.c || p.groups != p.c_in || p.groups != p.c_out) {
    throw std::invalid_argument("depthwise_conv2d: groups=" + std::to_string(p.groups) +
                                " must equal c_in=" + std::to_string(p.c_in) +
                                " and c_out=" + std::to_string(p.c_out) + " and input channels " +
                                std::to_string(x.c));
  }
  return conv2d(x, p);
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, running statistics only.
template <typename Scalar>
Tensor4<Scalar> batchnorm_infer(const Tensor4<Scalar>& x, const BNParams<Scalar>& p) {
  p.validate();
  if (p.channels() != x.c) {
    throw std::invalid_argument("batchnorm_infer: parameter length " +
                                std::to_string(p.channels()) + " != input channels " +
                                std::to_string(x.c));
  }
  VecX<Scalar> scale(x.c), shift(x.c);
  for (int j = 0; j < x.c; ++j) {
    const Scalar s = p.gamma[j] / std::sqrt(p.running_var[j] + p.eps);
    scale[j] = s;
    shift[j] = p.beta[j] - p.running_mean[j] * s;
  }
  Tensor4<Scalar> y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    y.item(i).array() = (x.item(i).array().colwise() * scale.array()).colwise() + shift.array();
  }
  return y;
}

template <typename Scalar>
Scalar sigmoid_value(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

template <typename Scalar>
Scalar silu_value(Scalar v) {
  return v * sigmoid_value(v);
}

template <typename Scalar>
Tensor4<Scalar> sigmoid(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y(x.n, x.c, x.h, x.w);
  y.data.array() = Scalar(1) / (Scalar(1) + (-x.data.array()).exp());
  return y;
}

/// silu(x) = x * sigmoid(x)
template <typename Scalar>
Tensor4<Scalar> silu(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y(x.n, x.c, x.h, x.w);
  y.data.array() = x.data.array() / (Scalar(1) + (-x.data.array()).exp());
  return y;
}

template <typename Scalar>
Tensor4<Scalar> hadamard(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("hadamard: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor4<Scalar> y(a.n, a.c, a.h, a.w);
  y.data.array() = a.data.array() * b.data.array();
  return y;
}

/// Row-wise softmax over the unmasked entries; masked entries come out exactly 0.
/// Every row needs at least one unmasked entry.
template <typename Scalar>
MatX<Scalar> softmax_masked_rows(const MatX<Scalar>& logits, const MaskMat& mask) {
  if (logits.rows() != mask.rows() || logits.cols() != mask.cols()) {
    throw std::invalid_argument("softmax_masked_rows: logits " + std::to_string(logits.rows()) +
                                "x" + std::to_string(logits.cols()) + " vs mask " +
                                std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  }
  MatX<Scalar> out = MatX<Scalar>::Zero(logits.rows(), logits.cols());
  for (Eigen::Index a = 0; a < logits.rows(); ++a) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
      if (mask(a, b)) {
        any = true;
        m = std::max(m, logits(a, b));
      }
    }
    if (!any) {
      throw std::invalid_argument("softmax_masked_rows: row " + std::to_string(a) +
                                  " is fully masked");
    }
    Scalar denom = Scalar(0);
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
      if (mask(a, b)) denom += std::exp(logits(a, b) - m);
    }
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
      if (mask(a, b)) out(a, b) = std::exp(logits(a, b) - m) / denom;
    }
  }
  return out;
}

/// Spatial mean per channel, output shape (n, c, 1, 1).
template <typename Scalar>
Tensor4<Scalar> global_avg_pool(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y(x.n, x.c, 1, 1);
  for (int i = 0; i < x.n; ++i) {
    y.item(i).col(0) = x.item(i).rowwise().mean();
  }
  return y;
}

/// Channel-contiguous partition; sizes must sum to x.c.
template <typename Scalar>
std::vector<Tensor4<Scalar>> channel_split(const Tensor4<Scalar>& x,
                                           const std::vector<int>& sizes) {
  int total = 0;
  for (int s : sizes) {
    if (s < 1) throw std::invalid_argument("channel_split: sizes must be >= 1");
    total += s;
  }
  if (total != x.c) {
    throw std::invalid_argument("channel_split: sizes sum to " + std::to_string(total) +
                                " but input has " + std::to_string(x.c) + " channels");
  }
  std::vector<Tensor4<Scalar>> parts;
  parts.reserve(sizes.size());
  int offset = 0;
  for (int s : sizes) {
    Tensor4<Scalar> part(x.n, s, x.h, x.w);
    for (int i = 0; i < x.n; ++i) {
      part.item(i) = x.item(i).middleRows(offset, s);
    }
    parts.push_back(std::move(part));
    offset += s;
  }
  return parts;
}

/// Stacks channels in argument order; all inputs share n, h, w.
template <typename Scalar>
Tensor4<Scalar> channel_concat(const std::vector<Tensor4<Scalar>>& xs) {
  if (xs.empty()) throw std::invalid_argument("channel_concat: no inputs");
  int c_total = xs[0].c;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].n != xs[0].n || xs[i].h != xs[0].h || xs[i].w != xs[0].w) {
      throw std::invalid_argument("channel_concat: input " + std::to_string(i) + " has shape " +
                                  xs[i].shape_str() + ", expected spatial/batch of " +
                                  xs[0].shape_str());
    }
    c_total += xs[i].c;
  }
  Tensor4<Scalar> y(xs[0].n, c_total, xs[0].h, xs[0].w);
  for (int i = 0; i < y.n; ++i) {
    int offset = 0;
    for (const auto& x : xs) {
      y.item(i).middleRows(offset, x.c) = x.item(i);
      offset += x.c;
    }
  }
  return y;
}

/// Indices of the k largest values, ties broken toward the lowest index.
/// Returned ascending so equal sets compare equal.
template <typename Scalar>
std::vector<int> top_k_indices(const VecX<Scalar>& values, int k) {
  const int n = static_cast<int>(values.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("top_k_indices: k=" + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace cgf
