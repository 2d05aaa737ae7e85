#include "impression/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "impression/error.hpp"

namespace impression {

double GradCheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& p : parameters) worst = std::max(worst, p.max_relative_error);
  return worst;
}

namespace {

double evaluate(const ScalarGraph& f) {
  Tape tape;
  return f(tape).value().item();
}

}  // namespace

GradCheckReport finite_difference_check(const ScalarGraph& f, std::span<Parameter* const> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ValueError("finite_difference_check: epsilon must lie in (0, 1e-2]");

  const double first = evaluate(f);
  const double second = evaluate(f);
  if (first != second) throw ValueError("finite_difference_check: function is not deterministic");

  std::vector<Tensor> saved;
  for (Parameter* p : params) {
    saved.push_back(p->grad);
    p->grad = Tensor(p->value.shape(), 0.0);
  }
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    ParameterGradError err{p.name};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double original = p.value[i];
      p.value[i] = original + eps;
      const double up = evaluate(f);
      p.value[i] = original - eps;
      const double down = evaluate(f);
      p.value[i] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel_err = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel_err > err.max_relative_error) {
        err.max_relative_error = rel_err;
        err.worst_index = i;
      }
      err.max_absolute_error = std::max(err.max_absolute_error, abs_err);
    }
    report.parameters.push_back(err);
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = std::move(saved[pi]);
  return report;
}

}  // namespace impression
