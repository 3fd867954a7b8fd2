#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "kdseg/tensor.hpp"

namespace kdseg {

// Verification harness for analytic gradients. Everything runs in the double
// instantiation of the tensor engine; the same templated kernels handle float
// training and this 64-bit check mode.
//
// fn must build a deterministic scalar from the given parameter tensors on the
// supplied tape. The harness backpropagates once for analytic gradients, then
// re-evaluates fn with each parameter element nudged +/- eps and compares the
// central difference. Returns the worst relative error over all elements, with
// denominators floored at 1e-8; any NaN along the way yields +inf.
using CheckedFn =
    std::function<TensorT<double>(TapeT<double>&, std::vector<TensorT<double>>&)>;

inline double finite_diff_check(const CheckedFn& fn, std::vector<TensorT<double>>& params,
                                double eps = 1e-5) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) throw ParamError("finite_diff_check eps outside [1e-6, 1e-2]");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }

  TapeT<double> tape;
  TensorT<double> loss = fn(tape, params);
  if (loss.numel() != 1) throw ParamError("finite_diff_check: fn must return a scalar");
  if (!std::isfinite(loss.item())) return std::numeric_limits<double>::infinity();
  backward(tape, loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto eval = [&]() {
    TapeT<double> t;
    NoGradScope<double> ng(t);
    return fn(t, params).item();
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double f_plus = eval();
      vals[i] = orig - eps;
      const double f_minus = eval();
      vals[i] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        return std::numeric_limits<double>::infinity();
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double an = analytic[pi][i];
      const double denom = std::max({1e-8, std::abs(fd), std::abs(an)});
      const double rel = std::abs(fd - an) / denom;
      if (std::isnan(rel)) return std::numeric_limits<double>::infinity();
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace kdseg
