#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bindllm/tape.hpp"

namespace bindllm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalar loss against central
// differences, coordinate by coordinate over every parameter in `params`.
// Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                                  std::span<Parameter* const> params, double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw ConfigError("grad_check: step h must lie in (0, 1e-2]");

  for (Parameter* p : params) p->grad = Tensor(p->value.shape());
  {
    Tape tape;
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }

  auto evaluate = [&](const std::string& coord) {
    try {
      Tape tape;
      const double v = loss_fn(tape).value()[0];
      if (!std::isfinite(v)) throw NumericError("non-finite loss");
      return v;
    } catch (const NumericError& e) {
      throw NumericError("grad_check: non-finite intermediate while perturbing " + coord + " (" +
                         e.what() + ")");
    }
  };

  GradCheckReport report;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const std::string coord = p->name + "[" + std::to_string(i) + "]";
      const double saved = p->value[i];
      double up = 0.0, down = 0.0;
      try {
        p->value[i] = saved + h;
        up = evaluate(coord);
        p->value[i] = saved - h;
        down = evaluate(coord);
      } catch (...) {
        p->value[i] = saved;
        throw;
      }
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      if (!std::isfinite(analytic)) throw NumericError("grad_check: non-finite gradient at " + coord);
      const double rel = std::abs(analytic - numeric) /
                         std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++report.coordinates;
      if (rel > report.max_rel_error || report.worst_coordinate.empty()) {
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_coordinate = coord;
        }
      }
    }
  }
  return report;
}

}  // namespace bindllm
