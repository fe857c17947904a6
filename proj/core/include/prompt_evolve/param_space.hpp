#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prompt_evolve/autodiff.hpp"
#include "prompt_evolve/tensor.hpp"

namespace prompt_evolve {

struct ParameterEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const ParameterEntry&, const ParameterEntry&) = default;
};

// Named flat view over a set of trainable tensors. Entry order is part of the
// identity: two vectors are aligned iff names, order and lengths all agree.
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(std::vector<ParameterEntry> entries);

  void add(std::string name, const Tensor& tensor);

  const std::vector<ParameterEntry>& entries() const { return entries_; }
  std::size_t total_len() const { return total_len_; }
  bool empty() const { return entries_.empty(); }

  const ParameterEntry& entry(std::string_view name) const;
  Tensor tensor(std::string_view name) const;

  std::vector<double> flatten() const;
  // Same layout, new contents.
  ParameterVector with_values(std::span<const double> flat) const;

  bool aligned_with(const ParameterVector& other) const;
  // Throws AlignmentError naming the first mismatched entry.
  void require_aligned(const ParameterVector& other) const;

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::vector<ParameterEntry> entries_;
  std::size_t total_len_ = 0;
};

int8_t sign_of(double v);

struct TaskVector {
  std::vector<double> values;
  std::vector<double> magnitude;
  std::vector<int8_t> sign;
};

TaskVector task_vector(const ParameterVector& current, const ParameterVector& base);

// floor(fraction * n) indices with the largest magnitudes, ties to the lower
// index, returned in ascending index order.
std::vector<std::size_t> top_fraction_indices(std::span<const double> magnitude, double fraction);
std::size_t top_fraction_count(std::size_t n, double fraction);

struct FusionConfig {
  double top_k = 0.7;  // fraction of previous-task parameters preserved
  double top_l = 0.3;  // fraction of current-task parameters preserved

  void validate() const;
};

enum class FusionBranch : uint8_t { PreservedPrev, PreservedCurr, Averaged, Fallback };

struct FusionAudit {
  std::size_t preserved_prev = 0;
  std::size_t preserved_curr = 0;
  std::size_t averaged = 0;
  std::size_t fallback = 0;
  std::vector<std::size_t> prev_indices;
  std::vector<std::size_t> curr_indices;
  std::vector<FusionBranch> branches;

  std::size_t total() const { return preserved_prev + preserved_curr + averaged + fallback; }
};

struct FusionResult {
  ParameterVector fused;
  FusionAudit audit;
};

// Magnitude/sign fusion of the current task's parameters into the previous
// fused parameters. Per index, first matching rule wins:
//   1. i among the top_k largest |prev - init|      -> prev
//   2. i among the top_l largest |curr - prev|      -> curr
//   3. sgn(curr - prev) == sgn(prev - init) != 0    -> (prev + curr) / 2
//   4. otherwise                                    -> prev
FusionResult fuse(const ParameterVector& theta_curr, const ParameterVector& theta_prev_fused,
                  const ParameterVector& theta_init, const FusionConfig& cfg);

// lambda * sum_j sum_i |theta_j[i]|.
double sparse_loss(std::span<const ParameterVector> prompt_params, double lambda);
Var sparse_loss(std::span<const Var> prompt_params, double lambda);

// Fraction of entries with |value| < eps.
double sparsity_report(const ParameterVector& pv, double eps);

}  // namespace prompt_evolve
