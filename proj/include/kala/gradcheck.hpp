#pragma once

// Central finite-difference gradient oracle. Deliberately independent of the
// tape machinery: it only perturbs raw data and re-evaluates the forward
// function, so it can cross-check backward().

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "kala/error.hpp"
#include "kala/tensor.hpp"

namespace kala {

// (f(p+h) - f(p-h)) / (2h) per coordinate of `param`. `f` must evaluate the
// full forward pass from current parameter values.
inline std::vector<double> finite_difference_gradient(
    const std::function<double()>& f, Tensor& param, double h = 1e-6) {
  if (h <= 0.0) throw ContractError("finite_difference_gradient: h must be > 0");
  std::vector<double> est(param.numel());
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double f_plus = f();
    param.data()[i] = saved - h;
    const double f_minus = f();
    param.data()[i] = saved;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
      throw NumericError("finite_difference_gradient: non-finite function value");
    est[i] = (f_plus - f_minus) / (2.0 * h);
  }
  return est;
}

// Max relative error between an analytic and an estimated gradient, with an
// absolute floor so near-zero coordinates do not explode the ratio.
inline double max_relative_error(const std::vector<double>& analytic,
                                 const std::vector<double>& estimate,
                                 double floor = 1e-8) {
  if (analytic.size() != estimate.size())
    throw ContractError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::fabs(analytic[i]), std::fabs(estimate[i]), floor});
    worst = std::max(worst, std::fabs(analytic[i] - estimate[i]) / denom);
  }
  return worst;
}

}  // namespace kala
