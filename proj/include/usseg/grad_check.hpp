#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "usseg/tape.hpp"
#include "usseg/tensor.hpp"

namespace usseg {

// Central finite-difference check of the analytic gradients, run in
// 64-bit mode. `f` must be a deterministic scalar function of the given
// parameter tensors (captured by handle). Returns the max over all
// parameter entries of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<Tensor<double>()>& f,
                         const std::vector<Tensor<double>>& params, double step = 1e-4) {
  for (const auto& p : params) {
    p.set_requires_grad(true);
    p.drop_grad();
  }
  std::vector<ArrayX<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f();
    if (loss.size() != 1) throw ShapeError("grad_check: f must return a scalar tensor");
    if (!std::isfinite(loss.item())) throw NumericsError("grad_check: f returned non-finite value");
    tape.backward(loss);
    for (const auto& p : params) {
      analytic.push_back(p.has_grad() ? p.grad() : ArrayX<double>::Zero(p.size()));
    }
  }

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    for (Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + step;
      const double fp = f().item();
      p.data()[i] = saved - step;
      const double fm = f().item();
      p.data()[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericsError("grad_check: perturbed f returned non-finite value");
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace usseg
