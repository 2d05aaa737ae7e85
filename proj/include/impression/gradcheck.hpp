#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "impression/autodiff.hpp"

namespace impression {

struct ParameterGradError {
  std::string name;
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<ParameterGradError> parameters;
  double max_relative_error() const;
};

/// Builds a scalar loss on the given tape from the parameters it captures.
using ScalarGraph = std::function<Var(Tape&)>;

/// Compares tape gradients against central differences
/// (f(p+eps) - f(p-eps)) / 2eps for every element of every parameter.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
/// Throws ValueError when eps is outside (0, 1e-2] or f is not deterministic.
GradCheckReport finite_difference_check(const ScalarGraph& f, std::span<Parameter* const> params, double eps = 1e-5);

}  // namespace impression
