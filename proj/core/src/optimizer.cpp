#include "prompt_evolve/optimizer.hpp"

#include <cmath>
#include <string>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "gd";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "gd" || name == "sgd") return OptimizerKind::GradientDescent;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or gd)");
}

Optimizer::Optimizer(OptimizerOptions options, std::size_t slots)
    : options_(options), m_(slots), v_(slots) {}

void Optimizer::step(std::size_t slot, Tensor& param, std::span<const double> grad, double lr) {
  if (slot >= m_.size()) throw DimensionError("optimizer slot " + std::to_string(slot) + " out of range");
  if (grad.size() != param.size()) {
    throw DimensionError("optimizer slot " + std::to_string(slot) + ": gradient length " +
                         std::to_string(grad.size()) + " vs parameter length " + std::to_string(param.size()));
  }
  if (t_ == 0) throw NumericError("optimizer step() called before begin_step()");
  auto theta = param.mutable_data();
  const double wd = options_.weight_decay;
  if (options_.kind == OptimizerKind::GradientDescent) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * (grad[i] + wd * theta[i]);
    return;
  }
  auto& m = m_[slot];
  auto& v = v_[slot];
  if (m.empty()) {
    m.assign(theta.size(), 0.0);
    v.assign(theta.size(), 0.0);
  }
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + options_.epsilon) + wd * theta[i]);
  }
}

}  // namespace prompt_evolve
