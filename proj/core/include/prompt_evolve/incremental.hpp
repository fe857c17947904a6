#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prompt_evolve/checkpoint.hpp"
#include "prompt_evolve/config.hpp"
#include "prompt_evolve/detector.hpp"

namespace prompt_evolve {

struct LossOptions {
  double focal_alpha = 0.5;
  double focal_gamma = 3.0;
  double box_weight = 1.0;
  // Added inside the log so an exactly-zero probability stays finite.
  double log_floor = 1e-12;
};

// Focal classification loss averaged over slots (unassigned slots target the
// no-object class) plus box_weight times the mean absolute box error over
// assigned slots. assignment[s] indexes `targets` or is -1.
Var detection_loss(Var logits, Var boxes, std::span<const int> assignment, std::span<const Target> targets,
                   std::size_t no_object_class, const LossOptions& options);

// Assigns slots to targets from the forward values, then builds the loss.
Var detection_loss(const ForwardOutput& out, std::span<const Target> targets, std::size_t no_object_class,
                   const LossOptions& options, std::vector<int>* assignment = nullptr);

struct TrainingExample {
  Proposals proposals;
  std::vector<Target> targets;
};

// Training targets for one task: ground truth, merged with pseudo labels from
// `labeler` (the previous model) when it is given.
std::vector<TrainingExample> build_training_set(const ToyDetector& model, std::span<const SyntheticScene> scenes,
                                                std::span<const int> current_classes, const ToyDetector* labeler,
                                                double tau);

struct TrainStats {
  std::vector<double> epoch_loss;      // mean batch loss per epoch
  std::vector<double> prompt_l1;       // sum |theta| of the prompt parameters after each epoch
  std::size_t steps = 0;
};

// Trains the class head, box head and prompt generators in place. Throws
// NumericError naming the step when the loss becomes non-finite.
TrainStats train_task(ToyDetector& model, std::span<const TrainingExample> examples, const TrainingConfig& cfg,
                      double lambda_sparse, uint64_t shuffle_seed);

// AP50 over the classes in `classes`, evaluated on `scenes` against every
// object of those classes (labeled or not).
ApReport evaluate(const ToyDetector& model, std::span<const SyntheticScene* const> scenes, std::span<const int> classes);

struct MetricRow {
  int task = 0;
  Stage stage = Stage::Trained;
  std::string class_group;  // current | previous | all
  std::optional<double> ap50;
};

std::string metrics_csv(std::span<const MetricRow> rows);

struct TaskRecord {
  int task_id = 0;
  Checkpoint trained;                // prompt parameters after training
  std::optional<Checkpoint> fused;   // t >= 2 with fusion enabled
  Checkpoint heads;                  // head parameters after training
  Stage evaluated = Stage::Trained;  // which prompt snapshot produced the metrics
  std::optional<FusionAudit> audit;
  TrainStats stats;
  std::size_t pseudo_labels_added = 0;
  uint64_t frozen_hash_before = 0;
  uint64_t frozen_hash_after = 0;
};

struct RunResult {
  RunConfig config;
  Checkpoint init;
  Checkpoint init_heads;
  std::vector<TaskRecord> tasks;
  std::vector<MetricRow> metrics;
  std::size_t trainable_parameters = 0;

  // Prompt parameters used for evaluation after the last task.
  const Checkpoint& final_prompts() const;
  std::optional<double> final_ap(const std::string& class_group) const;
};

// Configuration the run actually uses for the detector (prompts toggle applied).
DetectorConfig effective_detector_config(const RunConfig& cfg);
ToyDetector build_detector(const RunConfig& cfg);
TaskSequence build_task_sequence(const RunConfig& cfg);

// For each task: pseudo-label with the previous model, train, fuse prompts
// (t >= 2), evaluate on held-out scenes of every task seen so far.
RunResult run_incremental(const RunConfig& cfg);

// Writes config.json, metrics.csv, summary.json and checkpoints/ into `dir`
// (which must exist).
void write_run_directory(const std::filesystem::path& dir, const RunResult& result);

// Restores a detector from a run directory with the prompt and head
// parameters of `task` (1-based) at the stage used for its evaluation.
ToyDetector load_detector_for_task(const std::filesystem::path& dir, const RunConfig& cfg, int task);

}  // namespace prompt_evolve
