#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prompt_evolve/config.hpp"
#include "prompt_evolve/evaluation.hpp"

namespace prompt_evolve {

using SampleSet = std::vector<std::vector<double>>;

struct MmdConfig {
  std::optional<double> bandwidth;  // Gaussian sigma; nullopt selects the median heuristic
};

// Median of all pairwise Euclidean distances within the pooled sample; 1.0
// when that median is zero.
double median_heuristic_bandwidth(const SampleSet& a, const SampleSet& b);

// Biased (V-statistic) squared MMD with k(x, y) = exp(-|x - y|^2 / (2 sigma^2)),
// clamped at zero. Kernel sums are accumulated in sorted order, so identical
// multisets give exactly 0 and the result is symmetric in (a, b).
double mmd2(const SampleSet& a, const SampleSet& b, const MmdConfig& cfg = {});

// Mean mmd2 over all unordered pairs of task sample sets. Needs >= 2 sets.
double a_mmd(std::span<const SampleSet> per_task, const MmdConfig& cfg = {});

// ---------------------------------------------------------------------------

enum class SweepGrid { FusionThresholds, Lambda, HiddenDim };

SweepGrid parse_sweep_grid(const std::string& name);  // table7 | table8 | dim
std::string sweep_csv_name(SweepGrid grid);

struct SweepCell {
  std::string label;
  RunConfig config;
};

struct SweepRow {
  SweepCell cell;
  std::optional<double> ap_all;
  std::optional<double> ap_previous;
  std::optional<double> ap_current;
  std::size_t trainable_parameters = 0;
  double near_zero_fraction = 0.0;
};

inline constexpr double kNearZeroEps = 1e-4;

// Threshold grid: no fusion, (0,0) (0,.3) (0,.7) (.3,.3) (.3,.7) (.7,.3) (.7,.7), (1,-).
std::vector<SweepCell> fusion_threshold_cells(const RunConfig& base);
std::vector<SweepCell> lambda_cells(const RunConfig& base, std::span<const double> lambdas);
std::vector<SweepCell> hidden_dim_cells(const RunConfig& base, std::span<const std::size_t> dims);
std::vector<SweepCell> sweep_cells(SweepGrid grid, const RunConfig& base);

inline constexpr double kLambdaGrid[] = {0.0, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4};
inline constexpr std::size_t kHiddenDimGrid[] = {2, 4, 8, 16, 32};

// Runs every cell (in parallel up to `threads`); rows keep the cell order.
std::vector<SweepRow> run_sweep(std::span<const SweepCell> cells, std::size_t threads);
std::string sweep_table_csv(SweepGrid grid, std::span<const SweepRow> rows);

// ---------------------------------------------------------------------------
// Run-directory diagnostics.

// A-MMD per decoder layer. Task t's samples are the flattened prompts its own
// evaluation parameters generate on up to `scenes_per_task` held-out scenes.
std::vector<double> ammd_per_layer(const std::filesystem::path& run_dir, std::size_t scenes_per_task = 30);
std::string ammd_csv(std::span<const double> per_layer);

// Object-task x prompt-task cosine similarity between proposal features of
// task-i objects and last-layer prompt rows of task j's parameters.
std::vector<std::vector<double>> prompt_similarity(const std::filesystem::path& run_dir,
                                                   std::size_t scenes_per_task = 30);

}  // namespace prompt_evolve
