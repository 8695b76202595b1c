#pragma once

#include <cgf/tensor.hpp>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgf {

struct GradReport {
  std::string param_name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  Eigen::Index worst_index = 0;
  bool passed = false;
};

/// Mutable view of one named parameter tensor, f64 only.
struct ParamView {
  std::string name;
  double* data = nullptr;
  Eigen::Index size = 0;
};

inline constexpr double kGradAbsFloor = 1e-7;

/// Central finite differences against caller-supplied analytic gradients.
/// loss(theta) must evaluate the scalar-sum loss with the current parameter
/// values; analytic[i] pairs with params[i]. An element counts as passing when
/// its relative error meets tol or the absolute error sits under abs_floor.
inline std::vector<GradReport> grad_check(const std::function<double()>& loss,
                                          const std::vector<ParamView>& params,
                                          const std::vector<VecX<double>>& analytic, double h,
                                          double tol, double abs_floor = kGradAbsFloor) {
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("grad_check: analytic gradient count does not match params");
  }
  std::vector<GradReport> reports;
  reports.reserve(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) {
    const ParamView& pv = params[t];
    if (analytic[t].size() != pv.size) {
      throw std::invalid_argument("grad_check: analytic gradient for " + pv.name +
                                  " has wrong length");
    }
    GradReport rep;
    rep.param_name = pv.name;
    rep.passed = true;
    for (Eigen::Index e = 0; e < pv.size; ++e) {
      const double saved = pv.data[e];
      pv.data[e] = saved + h;
      const double lp = loss();
      pv.data[e] = saved - h;
      const double lm = loss();
      pv.data[e] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw std::runtime_error("grad_check: non-finite loss while perturbing " + pv.name +
                                 "[" + std::to_string(e) + "]");
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[t][e];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
      const bool ok = rel_err <= tol || abs_err <= abs_floor;
      if (rel_err > rep.max_rel_err) {
        rep.max_rel_err = rel_err;
        rep.worst_index = e;
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      if (!ok) rep.passed = false;
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

inline bool all_passed(const std::vector<GradReport>& reports) {
  for (const auto& r : reports) {
    if (!r.passed) return false;
  }
  return true;
}

}  // namespace cgf
