#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "prompt_evolve/detector.hpp"
#include "prompt_evolve/optimizer.hpp"
#include "prompt_evolve/param_space.hpp"

namespace prompt_evolve {

struct TrainingConfig {
  double learning_rate_main = 3e-3;  // class head and prompt generators
  double learning_rate_box = 3e-4;   // box head
  std::size_t epochs_per_task = 60;
  std::size_t lr_drop_epoch = 48;
  double lr_drop_factor = 0.1;
  double lambda_sparse = 1e-5;
  double tau_pseudo = 0.65;
  double focal_alpha = 0.5;
  double focal_gamma = 3.0;
  std::size_t batch_size = 20;
  double box_loss_weight = 1.0;
  OptimizerOptions optimizer;
  FusionConfig fusion;

  void validate() const;
};

// Switches for the component ablation.
struct AblationToggles {
  bool pseudo_labeling = true;
  bool prompts = true;
  bool fusion = true;
  bool sparse_loss = true;
  bool warm_start_heads = true;
};

struct RunConfig {
  uint64_t seed = 0;
  DetectorConfig detector;
  SceneOptions scenes;
  std::vector<TaskSpec> tasks;
  TrainingConfig training;
  AblationToggles ablation;

  void validate() const;
  // Class ids of tasks [0, count).
  std::vector<int> classes_up_to(std::size_t count) const;
};

// Four tasks of three classes each over twelve classes.
std::vector<TaskSpec> default_task_specs();
RunConfig default_run_config();

// Missing fields keep their defaults; unknown fields, wrong types and
// out-of-range values raise ConfigError naming the field path.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace prompt_evolve
