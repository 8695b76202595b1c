#pragma once

#include <cgf/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <random>

namespace cgf {

/// mt19937_64 with hand-rolled distributions so that streams are identical
/// across standard libraries for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename Scalar>
  void fill_uniform(VecX<Scalar>& v, double lo, double hi) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(uniform(lo, hi));
  }

  template <typename Scalar>
  void fill_uniform(Tensor4<Scalar>& t, double lo, double hi) {
    fill_uniform(t.data, lo, hi);
  }

  template <typename Scalar>
  void fill_normal(VecX<Scalar>& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(normal());
  }

  template <typename Scalar>
  void fill_normal(Tensor4<Scalar>& t) {
    fill_normal(t.data);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace cgf
