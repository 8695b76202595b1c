#pragma once

#include <cgf/ops.hpp>
#include <cgf/tensor.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

// Hand-written vector-Jacobian products for the primitives. Frozen-statistics
// semantics throughout: batch norm differentiates only its affine pair.

namespace cgf {

template <typename Scalar>
struct ConvGrads {
  VecX<Scalar> d_kernel;
  VecX<Scalar> d_bias;  // empty when the conv has no bias
  Tensor4<Scalar> dx;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p,
                                  const Tensor4<Scalar>& gy) {
  p.validate();
  const auto [ho, wo] = conv_output_dims(x.h, x.w, p.k_h, p.k_w, p.stride, p.padding);
  if (gy.n != x.n || gy.c != p.c_out || gy.h != ho || gy.w != wo) {
    throw std::invalid_argument("conv2d_backward: upstream grad shape " + gy.shape_str() +
                                " does not match conv output");
  }
  ConvGrads<Scalar> g;
  g.d_kernel = VecX<Scalar>::Zero(p.kernel.size());
  g.d_bias = VecX<Scalar>::Zero(p.has_bias() ? p.c_out : 0);
  g.dx = Tensor4<Scalar>(x.n, x.c, x.h, x.w);

  const int cpg = p.c_in_per_group();
  const int opg = p.c_out_per_group();
  for (int i = 0; i < x.n; ++i) {
    for (int oc = 0; oc < p.c_out; ++oc) {
      const int gr = oc / opg;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
          const Scalar go = gy(i, oc, oh, ow);
          if (p.has_bias()) g.d_bias[oc] += go;
          for (int ic = 0; ic < cpg; ++ic) {
            const int xc = gr * cpg + ic;
            for (int r = 0; r < p.k_h; ++r) {
              const int ih = oh * p.stride - p.padding + r;
              if (ih < 0 || ih >= x.h) continue;
              for (int s = 0; s < p.k_w; ++s) {
                const int iw = ow * p.stride - p.padding + s;
                if (iw < 0 || iw >= x.w) continue;
                g.d_kernel[p.kernel_index(oc, ic, r, s)] += go * x(i, xc, ih, iw);
                g.dx(i, xc, ih, iw) += go * p.kat(oc, ic, r, s);
              }
            }
          }
        }
      }
    }
  }
  return g;
}

template <typename Scalar>
struct BNGrads {
  VecX<Scalar> d_gamma;
  VecX<Scalar> d_beta;
  Tensor4<Scalar> dx;
};

template <typename Scalar>
BNGrads<Scalar> batchnorm_infer_backward(const Tensor4<Scalar>& x, const BNParams<Scalar>& p,
                                         const Tensor4<Scalar>& gy) {
  if (!x.same_shape(gy) || p.channels() != x.c) {
    throw std::invalid_argument("batchnorm_infer_backward: shape mismatch");
  }
  BNGrads<Scalar> g;
  g.d_gamma = VecX<Scalar>::Zero(x.c);
  g.d_beta = VecX<Scalar>::Zero(x.c);
  g.dx = Tensor4<Scalar>(x.n, x.c, x.h, x.w);
  for (int j = 0; j < x.c; ++j) {
    const Scalar inv_std = Scalar(1) / std::sqrt(p.running_var[j] + p.eps);
    for (int i = 0; i < x.n; ++i) {
      auto xr = x.item(i).row(j).array();
      auto gr = gy.item(i).row(j).array();
      g.d_gamma[j] += (gr * (xr - p.running_mean[j]) * inv_std).sum();
      g.d_beta[j] += gr.sum();
      g.dx.item(i).row(j).array() = gr * p.gamma[j] * inv_std;
    }
  }
  return g;
}

template <typename Scalar>
Scalar sigmoid_grad_value(Scalar v) {
  const Scalar s = sigmoid_value(v);
  return s * (Scalar(1) - s);
}

template <typename Scalar>
Scalar silu_grad_value(Scalar v) {
  const Scalar s = sigmoid_value(v);
  return s * (Scalar(1) + v * (Scalar(1) - s));
}

template <typename Scalar>
Tensor4<Scalar> sigmoid_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& gy) {
  Tensor4<Scalar> dx(x.n, x.c, x.h, x.w);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    dx.data[i] = gy.data[i] * sigmoid_grad_value(x.data[i]);
  }
  return dx;
}

template <typename Scalar>
Tensor4<Scalar> silu_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& gy) {
  Tensor4<Scalar> dx(x.n, x.c, x.h, x.w);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    dx.data[i] = gy.data[i] * silu_grad_value(x.data[i]);
  }
  return dx;
}

template <typename Scalar>
Tensor4<Scalar> global_avg_pool_backward(const Tensor4<Scalar>& gy, int h, int w) {
  Tensor4<Scalar> dx(gy.n, gy.c, h, w);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(static_cast<double>(h) * w);
  for (int i = 0; i < gy.n; ++i) {
    for (int j = 0; j < gy.c; ++j) {
      dx.item(i).row(j).setConstant(gy(i, j, 0, 0) * inv);
    }
  }
  return dx;
}

/// Backward through a row-wise masked softmax. alpha is the forward output;
/// masked positions receive exactly zero gradient.
template <typename Scalar>
MatX<Scalar> softmax_masked_rows_backward(const MatX<Scalar>& alpha, const MatX<Scalar>& galpha,
                                          const MaskMat& mask) {
  MatX<Scalar> glogits = MatX<Scalar>::Zero(alpha.rows(), alpha.cols());
  for (Eigen::Index a = 0; a < alpha.rows(); ++a) {
    Scalar dot = Scalar(0);
    for (Eigen::Index b = 0; b < alpha.cols(); ++b) {
      if (mask(a, b)) dot += galpha(a, b) * alpha(a, b);
    }
    for (Eigen::Index b = 0; b < alpha.cols(); ++b) {
      if (mask(a, b)) glogits(a, b) = alpha(a, b) * (galpha(a, b) - dot);
    }
  }
  return glogits;
}

}  // namespace cgf
