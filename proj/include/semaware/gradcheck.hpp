#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "semaware/tensor.hpp"

namespace semaware {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;   // flat index over all checked coordinates
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;

  bool passed(double tol = 1e-3) const { return max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central differences on every coordinate of each tensor in `params`, compared
// against the paired analytic gradients. `loss` is evaluated with the tensors
// perturbed in place; each coordinate is restored afterwards.
inline GradcheckReport gradcheck_params(
    const std::function<double()>& loss,
    const std::vector<std::pair<Tensor<double>*, const Tensor<double>*>>& params_and_grads,
    double step = 1e-4) {
  GradcheckReport rep;
  std::size_t flat = 0;
  for (const auto& [param, grad] : params_and_grads) {
    require_same_shape(*param, *grad, "gradcheck");
    for (std::size_t i = 0; i < param->size(); ++i, ++flat) {
      const double orig = (*param)[i];
      (*param)[i] = orig + step;
      const double up = loss();
      (*param)[i] = orig - step;
      const double down = loss();
      (*param)[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = (*grad)[i];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic)) {
        throw std::runtime_error("gradcheck: non-finite value at coordinate " + std::to_string(flat));
      }
      const double err = relative_error(analytic, numeric);
      if (err > rep.max_rel_error || flat == 0) {
        rep.max_rel_error = err;
        rep.worst_index = flat;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.coordinates = flat;
  return rep;
}

// Estimated truncation error of the step-`step` central difference per
// coordinate, from its disagreement with the step/2 estimate (Richardson:
// err(h) ~ 4/3 |D(h) - D(h/2)|), relative as in relative_error. Uses no
// analytic gradient, so it can screen test points without masking bugs.
inline double central_difference_instability(
    const std::function<double()>& loss, const std::vector<Tensor<double>*>& params, double step = 1e-4) {
  double worst = 0.0;
  auto diff = [&](Tensor<double>& t, std::size_t i, double h) {
    const double orig = t[i];
    t[i] = orig + h;
    const double up = loss();
    t[i] = orig - h;
    const double down = loss();
    t[i] = orig;
    return (up - down) / (2.0 * h);
  };
  for (Tensor<double>* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double a = diff(*p, i, step), b = diff(*p, i, 0.5 * step);
      worst = std::max(worst, 4.0 / 3.0 * relative_error(a, b));
    }
  }
  return worst;
}

// Checks an operator exposing (loss, grad) at point x.
inline GradcheckReport gradcheck(
    const std::function<std::pair<double, Tensor<double>>(const Tensor<double>&)>& op,
    const Tensor<double>& x, double step = 1e-4) {
  Tensor<double> point = x;
  const auto analytic = op(point).second;
  return gradcheck_params([&] { return op(point).first; }, {{&point, &analytic}}, step);
}

}  // namespace semaware
