#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "prompt_evolve/autodiff.hpp"

namespace prompt_evolve {

// A deterministic scalar function of tensors, built on the tape it is given.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-6;
  // Denominator floor of the relative error, so entries whose true gradient
  // is ~0 are judged on absolute error.
  double relative_floor = 1e-3;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  std::size_t elements_checked = 0;
  bool passed = true;
};

// Compares the tape gradient of `f` at `inputs` with central differences
// (f(x+eps) - f(x-eps)) / (2 eps), element by element. Throws NumericError
// naming the perturbed element if any evaluation is non-finite.
GradCheckReport check_gradients(const ScalarFunction& f, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options = {});

}  // namespace prompt_evolve
