#include "prompt_evolve/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

GradCheckReport check_gradients(const ScalarFunction& f, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("check_gradients: eps must be positive");

  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const Var out = f(tape, vars);
  if (!std::isfinite(out.value().item())) throw NumericError("check_gradients: f is non-finite at the base point");
  tape.backward(out);

  GradCheckReport report;
  std::vector<Tensor> probe = inputs;
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    const Tensor analytic = tape.grad(vars[in]);
    for (std::size_t e = 0; e < inputs[in].size(); ++e) {
      const double original = probe[in][e];
      probe[in][e] = original + options.eps;
      const double plus = evaluate(f, probe);
      probe[in][e] = original - options.eps;
      const double minus = evaluate(f, probe);
      probe[in][e] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("check_gradients: non-finite evaluation perturbing input " + std::to_string(in) +
                           " element " + std::to_string(e));
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[e];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), options.relative_floor});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = in;
        report.worst_element = e;
      }
      ++report.elements_checked;
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace prompt_evolve
