#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"

namespace visforce {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool finite = true;
  std::string failure;  // set when a non-finite value was seen

  bool passed(double tolerance) const { return finite && max_relative_error < tolerance; }
};

using ForwardFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients of a scalar-valued forward function with
/// central differences (f(θ+eps) − f(θ−eps)) / (2·eps) for every scalar entry of
/// every parameter. The per-entry error is |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckResult grad_check(const ForwardFn& forward, const std::vector<Parameter*>& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractViolation("grad_check: eps must lie in [1e-7, 1e-3]");

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = forward(tape);
    tape.backward(loss);
  }

  auto evaluate = [&]() {
    Tape tape;
    return forward(tape).value().item();
  };

  GradCheckResult result;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double analytic = p->grad[i];
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = evaluate();
      p->value[i] = saved - eps;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      ++result.checked;
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
        result.finite = false;
        result.failure = "non-finite gradient for parameter '" + p->id + "' at index " + std::to_string(i);
        result.worst_parameter = p->id;
        result.worst_index = i;
        return result;
      }
      const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        if (err > result.max_relative_error) result.max_relative_error = err;
        result.worst_parameter = p->id;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline GradCheckResult grad_check(const ForwardFn& forward, ParameterSet& params, double eps) {
  std::vector<Parameter*> list;
  for (auto& [id, p] : params) list.push_back(&p);
  return grad_check(forward, list, eps);
}

}  // namespace visforce
