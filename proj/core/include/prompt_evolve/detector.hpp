#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prompt_evolve/autodiff.hpp"
#include "prompt_evolve/evaluation.hpp"
#include "prompt_evolve/param_space.hpp"
#include "prompt_evolve/prompting.hpp"

namespace prompt_evolve {

struct SceneObject {
  int class_id = -1;
  Box box;
  uint64_t feature_seed = 0;
};

// One synthetic image. labeled_mask[i] is true iff objects[i] belongs to the
// task the scene was drawn for; other objects are present but unannotated.
struct SyntheticScene {
  std::vector<SceneObject> objects;
  std::vector<bool> labeled_mask;
  uint64_t seed = 0;

  std::vector<Target> labeled_targets() const;
  // Every object whose class is in `classes`, labeled or not.
  std::vector<Target> targets_for(std::span<const int> classes) const;
};

struct TaskSpec {
  int task_id = 1;
  std::vector<int> class_ids;
  std::size_t scene_count = 200;
  double co_occurrence_rate = 0.5;  // probability a scene carries out-of-task objects
};

struct SceneOptions {
  std::size_t max_labeled = 2;       // labeled objects per scene, drawn from [1, max]
  std::size_t max_co_occurring = 2;  // out-of-task objects per co-occurring scene, [1, max]
  std::size_t eval_scenes_per_task = 60;
};

struct TaskSequence {
  std::vector<TaskSpec> specs;
  std::vector<std::vector<SyntheticScene>> train;  // per task
  std::vector<std::vector<SyntheticScene>> test;   // per task, held out
};

// Deterministic in `seed`. Throws ConfigError when class sets overlap.
TaskSequence generate_task_sequence(uint64_t seed, const std::vector<TaskSpec>& specs,
                                    const SceneOptions& options = {});

// JSON lines: {"class_ids":[...],"boxes":[[cx,cy,w,h],...],"labeled_mask":[...],"seed":n}
std::string scene_to_json_line(const SyntheticScene& scene);
SyntheticScene scene_from_json_line(const std::string& line);

// ---------------------------------------------------------------------------

struct DetectorConfig {
  std::size_t num_classes = 12;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t hidden_dim = 8;
  std::size_t prompt_length = 8;
  std::size_t decoder_layers = 3;
  std::size_t ffn_dim = 64;
  std::size_t query_slots = 10;
  std::size_t raw_feature_dim = 16;
  double class_separation = 1.0;  // stddev of class prototypes
  double feature_noise = 0.5;     // per-object feature noise
  double box_jitter = 0.02;       // reference-box noise
  double prompt_init_scale = 0.5;
  DecoderOptions decoder;

  void validate() const;
};

// Proposals the frozen backbone produces for one scene.
struct Proposals {
  Tensor features;              // query_slots x embed_dim
  std::vector<Box> ref_boxes;   // per slot
  std::vector<int> slot_object; // index into scene.objects, -1 for background slots
};

// Frozen stand-in for the pretrained detector: class-conditional Gaussian
// object features, reference boxes, and a fixed random affine map into the
// embedding space.
class FrozenBackbone {
 public:
  FrozenBackbone(const DetectorConfig& cfg, uint64_t seed);

  Proposals propose(const SyntheticScene& scene) const;
  const Tensor& prototypes() const { return prototypes_; }
  std::string serialize() const;

 private:
  std::size_t slots_;
  std::size_t raw_dim_;
  double noise_;
  double jitter_;
  Tensor prototypes_;  // num_classes x raw_dim
  Tensor projection_;  // (raw_dim + 4) x embed_dim
  Tensor bias_;        // 1 x embed_dim
};

struct HeadParams {
  Tensor class_weight;  // C x (num_classes + 1); last column is "no object"
  Tensor class_bias;    // 1 x (num_classes + 1)
  Tensor box_weight;    // C x 4
  Tensor box_bias;      // 1 x 4
};

struct TrainableVars {
  std::vector<GeneratorVars> generators;
  Var class_weight;
  Var class_bias;
  Var box_weight;
  Var box_bias;
};

struct ForwardOutput {
  Var logits;  // slots x (num_classes + 1)
  Var boxes;   // slots x 4
};

// Frozen backbone and decoder (theta*) plus the trainable set: class head,
// box head and per-layer prompt generators.
class ToyDetector {
 public:
  ToyDetector(const DetectorConfig& cfg, uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  const FrozenBackbone& backbone() const { return backbone_; }
  const DecoderStack& decoder() const { return decoder_; }
  std::size_t no_object_class() const { return cfg_.num_classes; }

  ParameterVector prompt_parameters() const;
  void set_prompt_parameters(const ParameterVector& pv);
  ParameterVector head_parameters() const;
  void set_head_parameters(const ParameterVector& pv);
  const HeadParams& heads() const { return heads_; }
  HeadParams& heads() { return heads_; }
  std::size_t trainable_parameter_count() const;

  // Fingerprint of every frozen tensor.
  uint64_t frozen_hash() const;

  TrainableVars variables(Tape& tape) const;
  TrainableVars constants(Tape& tape) const;

  Proposals propose(const SyntheticScene& scene) const { return backbone_.propose(scene); }
  ForwardOutput forward(const Proposals& proposals, const TrainableVars& vars, DecoderTrace* trace = nullptr) const;

  // One detection per query slot.
  std::vector<Detection> infer(const Proposals& proposals) const;
  std::vector<Detection> infer(const SyntheticScene& scene) const { return infer(propose(scene)); }

  // Flattened per-layer prompts generated for a scene.
  std::vector<std::vector<double>> layer_prompts(const SyntheticScene& scene) const;

 private:
  DetectorConfig cfg_;
  FrozenBackbone backbone_;
  DecoderStack decoder_;
  HeadParams heads_;
};

// Greedy slot-to-target assignment: candidate pairs ordered by IoU of the
// predicted box, then by the slot's probability for the target class.
// Pairs below `min_iou` are never assigned. Returns target index per slot or -1.
std::vector<int> assign_targets(std::span<const Box> predicted, const Tensor& class_probs,
                                std::span<const Target> targets, double min_iou = 0.3);

}  // namespace prompt_evolve
