#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "prompt_evolve/tensor.hpp"

namespace prompt_evolve {

enum class OptimizerKind { Adam, GradientDescent };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;  // decoupled for Adam, L2-style for plain GD
};

// Per-slot optimizer state. Each trainable tensor owns a slot; step() must be
// called with the same slot for the same tensor throughout.
class Optimizer {
 public:
  Optimizer(OptimizerOptions options, std::size_t slots);

  const OptimizerOptions& options() const { return options_; }

  // Call once per update, before the per-slot steps.
  void begin_step() { ++t_; }
  void step(std::size_t slot, Tensor& param, std::span<const double> grad, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerOptions options_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace prompt_evolve
