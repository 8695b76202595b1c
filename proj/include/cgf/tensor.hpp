#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cgf {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VecX = Eigen::Vector<Scalar, Eigen::Dynamic>;

template <typename Scalar>
using MapMat = Eigen::Map<MatX<Scalar>>;

template <typename Scalar>
using CMapMat = Eigen::Map<const MatX<Scalar>>;

using MaskMat = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense NCHW feature map. Element (i, j, y, x) sits at ((i*c + j)*h + y)*w + x.
template <typename Scalar>
struct Tensor4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  VecX<Scalar> data;

  Tensor4() = default;

  Tensor4(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
    if (n_ <= 0 || c_ <= 0 || h_ <= 0 || w_ <= 0) {
      throw std::invalid_argument("Tensor4: dims must be positive, got (" + std::to_string(n_) +
                                  "," + std::to_string(c_) + "," + std::to_string(h_) + "," +
                                  std::to_string(w_) + ")");
    }
    data = VecX<Scalar>::Zero(static_cast<Eigen::Index>(n_) * c_ * h_ * w_);
  }

  Eigen::Index size() const { return data.size(); }

  Eigen::Index index(int i, int j, int y, int x) const {
    return ((static_cast<Eigen::Index>(i) * c + j) * h + y) * w + x;
  }

  Scalar& operator()(int i, int j, int y, int x) { return data[index(i, j, y, x)]; }
  Scalar operator()(int i, int j, int y, int x) const { return data[index(i, j, y, x)]; }

  /// Channels-by-pixels view of one batch item, shape (c, h*w).
  MapMat<Scalar> item(int i) {
    return MapMat<Scalar>(data.data() + index(i, 0, 0, 0), c, static_cast<Eigen::Index>(h) * w);
  }
  CMapMat<Scalar> item(int i) const {
    return CMapMat<Scalar>(data.data() + index(i, 0, 0, 0), c, static_cast<Eigen::Index>(h) * w);
  }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  bool all_finite() const { return data.allFinite(); }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

template <typename Scalar>
double max_abs_diff(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  if (a.size() == 0) return 0.0;
  return (a.data.template cast<double>() - b.data.template cast<double>())
      .cwiseAbs()
      .maxCoeff();
}

/// Convolution weights, kernel laid out (c_out, c_in/groups, k_h, k_w) row-major.
/// An empty bias vector means no bias term.
template <typename Scalar>
struct ConvParams {
  int c_out = 0;
  int c_in = 0;
  int k_h = 1;
  int k_w = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  VecX<Scalar> kernel;
  VecX<Scalar> bias;

  bool has_bias() const { return bias.size() > 0; }

  int c_in_per_group() const { return c_in / groups; }
  int c_out_per_group() const { return c_out / groups; }

  Eigen::Index kernel_index(int oc, int ic, int r, int s) const {
    return ((static_cast<Eigen::Index>(oc) * c_in_per_group() + ic) * k_h + r) * k_w + s;
  }

  Scalar kat(int oc, int ic, int r, int s) const { return kernel[kernel_index(oc, ic, r, s)]; }
  Scalar& kat(int oc, int ic, int r, int s) { return kernel[kernel_index(oc, ic, r, s)]; }

  void validate() const {
    if (stride < 1 || groups < 1) {
      throw std::invalid_argument("ConvParams: stride and groups must be >= 1, got stride=" +
                                  std::to_string(stride) + " groups=" + std::to_string(groups));
    }
    if (padding < 0) {
      throw std::invalid_argument("ConvParams: padding must be >= 0");
    }
    if ((k_h != 1 && k_h != 3) || (k_w != 1 && k_w != 3)) {
      throw std::invalid_argument("ConvParams: kernel sizes limited to {1,3}, got " +
                                  std::to_string(k_h) + "x" + std::to_string(k_w));
    }
    if (c_in % groups != 0 || c_out % groups != 0) {
      throw std::invalid_argument("ConvParams: c_in=" + std::to_string(c_in) +
                                  " and c_out=" + std::to_string(c_out) +
                                  " must both divide by groups=" + std::to_string(groups));
    }
    const Eigen::Index want =
        static_cast<Eigen::Index>(c_out) * c_in_per_group() * k_h * k_w;
    if (kernel.size() != want) {
      throw std::invalid_argument("ConvParams: kernel has " + std::to_string(kernel.size()) +
                                  " values, expected " + std::to_string(want));
    }
    if (bias.size() != 0 && bias.size() != c_out) {
      throw std::invalid_argument("ConvParams: bias length " + std::to_string(bias.size()) +
                                  " != c_out " + std::to_string(c_out));
    }
  }
};

/// Batch-norm inference statistics plus the learnable affine pair.
template <typename Scalar>
struct BNParams {
  VecX<Scalar> gamma;
  VecX<Scalar> beta;
  VecX<Scalar> running_mean;
  VecX<Scalar> running_var;
  Scalar eps = static_cast<Scalar>(1e-5);

  int channels() const { return static_cast<int>(gamma.size()); }

  void validate() const {
    const Eigen::Index c = gamma.size();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
      throw std::invalid_argument("BNParams: array lengths disagree (gamma=" +
                                  std::to_string(gamma.size()) + " beta=" +
                                  std::to_string(beta.size()) + " mean=" +
                                  std::to_string(running_mean.size()) + " var=" +
                                  std::to_string(running_var.size()) + ")");
    }
    if (eps <= Scalar(0)) {
      throw std::invalid_argument("BNParams: eps must be positive");
    }
    if ((running_var.array() < Scalar(0)).any()) {
      throw std::invalid_argument("BNParams: running_var must be >= 0 elementwise");
    }
  }
};

}  // namespace cgf
