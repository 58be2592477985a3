#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "insight/numcore/params.hpp"

namespace insight {

/// Evaluates a scalar loss over a store. When `with_grad` is true the
/// function must also accumulate the analytic gradient into the store.
using LossFn = std::function<double(ParamStore&, bool with_grad)>;

struct GradCheckOptions {
  double rel_tol = 1e-4;
  double step = 1e-5;
  /// Denominator floor for the per-coordinate relative error. Coordinates
  /// whose true derivative is below this are judged on absolute error.
  double abs_floor = 1e-6;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst_param;
  Eigen::Index worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares analytic gradients against central finite differences on every
/// coordinate of every parameter in `store`.
inline GradCheckReport grad_check(const LossFn& f, ParamStore& store, const GradCheckOptions& opt = {}) {
  store.zero_grads();
  const double base = f(store, true);
  if (!std::isfinite(base)) throw Error("grad_check: loss is not finite");

  GradCheckReport rep;
  for (auto& e : store.entries()) {
    const Tensor2 analytic = e.grad;
    for (Eigen::Index k = 0; k < e.value.size(); ++k) {
      double& x = e.value.data()[k];
      const double saved = x;
      x = saved + opt.step;
      const double up = f(store, false);
      x = saved - opt.step;
      const double down = f(store, false);
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error("grad_check: loss is not finite when perturbing '" + e.name + "'");
      }
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic.data()[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err || rep.worst_coord < 0) {
        rep.max_rel_err = rel;
        rep.worst_param = e.name;
        rep.worst_coord = k;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_err <= opt.rel_tol;
  return rep;
}

}  // namespace insight
