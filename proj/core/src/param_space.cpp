#include "prompt_evolve/param_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

ParameterVector::ParameterVector(std::vector<ParameterEntry> entries) {
  for (auto& e : entries) {
    add(std::move(e.name), Tensor(std::move(e.shape), std::move(e.values)));
  }
}

void ParameterVector::add(std::string name, const Tensor& tensor) {
  for (const auto& e : entries_) {
    if (e.name == name) throw AlignmentError("duplicate parameter entry '" + name + "'");
  }
  total_len_ += tensor.size();
  entries_.push_back(ParameterEntry{std::move(name), tensor.shape(), tensor.values()});
}

const ParameterEntry& ParameterVector::entry(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw AlignmentError("no parameter entry named '" + std::string(name) + "'");
}

Tensor ParameterVector::tensor(std::string_view name) const {
  const auto& e = entry(name);
  return Tensor(e.shape, e.values);
}

std::vector<double> ParameterVector::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_len_);
  for (const auto& e : entries_) flat.insert(flat.end(), e.values.begin(), e.values.end());
  return flat;
}

ParameterVector ParameterVector::with_values(std::span<const double> flat) const {
  if (flat.size() != total_len_) {
    throw AlignmentError("flat vector of length " + std::to_string(flat.size()) + " does not match " +
                         std::to_string(total_len_) + " parameters");
  }
  ParameterVector out = *this;
  std::size_t offset = 0;
  for (auto& e : out.entries_) {
    std::copy_n(flat.begin() + offset, e.values.size(), e.values.begin());
    offset += e.values.size();
  }
  return out;
}

bool ParameterVector::aligned_with(const ParameterVector& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].values.size() != other.entries_[i].values.size())
      return false;
  }
  return true;
}

void ParameterVector::require_aligned(const ParameterVector& other) const {
  const std::size_t common = std::min(entries_.size(), other.entries_.size());
  for (std::size_t i = 0; i < common; ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name) {
      throw AlignmentError("parameter entry " + std::to_string(i) + " is '" + a.name + "' vs '" + b.name + "'");
    }
    if (a.values.size() != b.values.size()) {
      throw AlignmentError("parameter entry '" + a.name + "' has length " + std::to_string(a.values.size()) +
                           " vs " + std::to_string(b.values.size()));
    }
  }
  if (entries_.size() != other.entries_.size()) {
    const auto& longer = entries_.size() > other.entries_.size() ? entries_ : other.entries_;
    throw AlignmentError("parameter entry '" + longer[common].name + "' is missing from one side");
  }
}

int8_t sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

TaskVector task_vector(const ParameterVector& current, const ParameterVector& base) {
  current.require_aligned(base);
  const auto c = current.flatten();
  const auto b = base.flatten();
  TaskVector tv;
  tv.values.resize(c.size());
  tv.magnitude.resize(c.size());
  tv.sign.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    tv.values[i] = c[i] - b[i];
    tv.magnitude[i] = std::fabs(tv.values[i]);
    tv.sign[i] = sign_of(tv.values[i]);
  }
  return tv;
}

std::size_t top_fraction_count(std::size_t n, double fraction) {
  // The 1e-9 slack keeps products such as 0.7 * 30 = 20.999999999999996 at 21.
  const double scaled = std::floor(fraction * static_cast<double>(n) + 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, scaled)));
}

std::vector<std::size_t> top_fraction_indices(std::span<const double> magnitude, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("top fraction " + std::to_string(fraction) + " outside [0, 1]");
  }
  const std::size_t count = top_fraction_count(magnitude.size(), fraction);
  std::vector<std::size_t> order(magnitude.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return magnitude[a] > magnitude[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

void FusionConfig::validate() const {
  if (!(top_k >= 0.0 && top_k <= 1.0)) throw ConfigError("fusion top_k must lie in [0, 1]");
  if (!(top_l >= 0.0 && top_l <= 1.0)) throw ConfigError("fusion top_l must lie in [0, 1]");
}

FusionResult fuse(const ParameterVector& theta_curr, const ParameterVector& theta_prev_fused,
                  const ParameterVector& theta_init, const FusionConfig& cfg) {
  cfg.validate();
  theta_curr.require_aligned(theta_prev_fused);
  theta_prev_fused.require_aligned(theta_init);

  const TaskVector current = task_vector(theta_curr, theta_prev_fused);
  const TaskVector previous = task_vector(theta_prev_fused, theta_init);
  const auto curr = theta_curr.flatten();
  const auto prev = theta_prev_fused.flatten();
  const std::size_t n = curr.size();

  FusionAudit audit;
  audit.prev_indices = top_fraction_indices(previous.magnitude, cfg.top_k);
  audit.curr_indices = top_fraction_indices(current.magnitude, cfg.top_l);
  std::vector<bool> in_prev(n, false), in_curr(n, false);
  for (auto i : audit.prev_indices) in_prev[i] = true;
  for (auto i : audit.curr_indices) in_curr[i] = true;

  std::vector<double> fused(n);
  audit.branches.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (in_prev[i]) {
      fused[i] = prev[i];
      audit.branches[i] = FusionBranch::PreservedPrev;
      ++audit.preserved_prev;
    } else if (in_curr[i]) {
      fused[i] = curr[i];
      audit.branches[i] = FusionBranch::PreservedCurr;
      ++audit.preserved_curr;
    } else if (current.sign[i] != 0 && current.sign[i] == previous.sign[i]) {
      fused[i] = 0.5 * (curr[i] + prev[i]);
      audit.branches[i] = FusionBranch::Averaged;
      ++audit.averaged;
    } else {
      fused[i] = prev[i];
      audit.branches[i] = FusionBranch::Fallback;
      ++audit.fallback;
    }
  }
  return FusionResult{theta_prev_fused.with_values(fused), std::move(audit)};
}

double sparse_loss(std::span<const ParameterVector> prompt_params, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("sparse loss lambda must be non-negative");
  double total = 0.0;
  for (const auto& pv : prompt_params)
    for (const auto& e : pv.entries())
      for (double v : e.values) total += std::fabs(v);
  return lambda * total;
}

Var sparse_loss(std::span<const Var> prompt_params, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("sparse loss lambda must be non-negative");
  if (prompt_params.empty()) throw ConfigError("sparse loss needs at least one parameter tensor");
  Var total = abs_sum(prompt_params[0]);
  for (std::size_t i = 1; i < prompt_params.size(); ++i) total = add(total, abs_sum(prompt_params[i]));
  return scale(total, lambda);
}

double sparsity_report(const ParameterVector& pv, double eps) {
  if (!(eps > 0.0)) throw ConfigError("sparsity eps must be positive");
  if (pv.total_len() == 0) return 0.0;
  std::size_t small = 0;
  for (const auto& e : pv.entries())
    for (double v : e.values) small += std::fabs(v) < eps ? 1 : 0;
  return static_cast<double>(small) / static_cast<double>(pv.total_len());
}

}  // namespace prompt_evolve
