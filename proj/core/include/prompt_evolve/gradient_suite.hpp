#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace prompt_evolve {

struct OpCheckResult {
  std::string op;
  double tolerance = 0.0;
  double max_relative_error = 0.0;
  std::size_t points = 0;
  bool passed = true;
};

inline constexpr double kSmoothOpTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;

// Finite-difference check of every differentiable op and of the composite
// model pieces (prompt generator, attention, detection and sparse losses) at
// `points` random inputs each.
std::vector<OpCheckResult> run_gradient_suite(uint64_t seed, std::size_t points = 20);

}  // namespace prompt_evolve
