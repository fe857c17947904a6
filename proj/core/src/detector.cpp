#include "prompt_evolve/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "json.hpp"

#include "prompt_evolve/checkpoint.hpp"
#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

using nlohmann::json;

std::vector<Target> SyntheticScene::labeled_targets() const {
  std::vector<Target> out;
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (labeled_mask[i]) out.push_back(Target{objects[i].class_id, objects[i].box});
  return out;
}

std::vector<Target> SyntheticScene::targets_for(std::span<const int> classes) const {
  std::vector<Target> out;
  for (const auto& o : objects)
    if (std::find(classes.begin(), classes.end(), o.class_id) != classes.end()) out.push_back(Target{o.class_id, o.box});
  return out;
}

namespace {

Box random_box(Rng& rng) {
  std::uniform_real_distribution<double> size(0.1, 0.3);
  const double w = size(rng), h = size(rng);
  std::uniform_real_distribution<double> ux(w / 2, 1.0 - w / 2), uy(h / 2, 1.0 - h / 2);
  const double cx = ux(rng);
  const double cy = uy(rng);
  return Box{cx, cy, w, h};
}

Box place_box(Rng& rng, const std::vector<SceneObject>& existing) {
  Box box = random_box(rng);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const bool clear = std::all_of(existing.begin(), existing.end(),
                                   [&](const SceneObject& o) { return iou(o.box, box) <= 0.1; });
    if (clear) break;
    box = random_box(rng);
  }
  return box;
}

SyntheticScene make_scene(uint64_t scene_seed, const TaskSpec& spec, const std::vector<int>& other_classes,
                          const SceneOptions& options) {
  Rng rng(scene_seed);
  SyntheticScene scene;
  scene.seed = scene_seed;
  std::uniform_int_distribution<std::size_t> n_lab(1, std::max<std::size_t>(1, options.max_labeled));
  std::uniform_int_distribution<std::size_t> pick_own(0, spec.class_ids.size() - 1);
  const std::size_t labeled = n_lab(rng);
  for (std::size_t i = 0; i < labeled; ++i) {
    const int cls = spec.class_ids[pick_own(rng)];
    scene.objects.push_back(SceneObject{cls, place_box(rng, scene.objects), 0});
    scene.labeled_mask.push_back(true);
  }
  std::bernoulli_distribution co(spec.co_occurrence_rate);
  if (co(rng) && !other_classes.empty()) {
    std::uniform_int_distribution<std::size_t> n_co(1, std::max<std::size_t>(1, options.max_co_occurring));
    std::uniform_int_distribution<std::size_t> pick_other(0, other_classes.size() - 1);
    const std::size_t extra = n_co(rng);
    for (std::size_t i = 0; i < extra; ++i) {
      const int cls = other_classes[pick_other(rng)];
      scene.objects.push_back(SceneObject{cls, place_box(rng, scene.objects), 0});
      scene.labeled_mask.push_back(false);
    }
  }
  for (std::size_t i = 0; i < scene.objects.size(); ++i) scene.objects[i].feature_seed = mix_seed(scene_seed, 100 + i);
  return scene;
}

void append_bytes(std::string& out, const Tensor& t) {
  const auto data = t.data();
  const std::size_t offset = out.size();
  out.resize(offset + data.size() * sizeof(double));
  std::memcpy(out.data() + offset, data.data(), data.size() * sizeof(double));
}

}  // namespace

TaskSequence generate_task_sequence(uint64_t seed, const std::vector<TaskSpec>& specs, const SceneOptions& options) {
  if (specs.empty()) throw ConfigError("task sequence needs at least one task");
  std::set<int> seen;
  for (const auto& spec : specs) {
    if (spec.class_ids.empty()) throw ConfigError("task " + std::to_string(spec.task_id) + " has no classes");
    if (!(spec.co_occurrence_rate >= 0.0 && spec.co_occurrence_rate <= 1.0)) {
      throw ConfigError("task " + std::to_string(spec.task_id) + " co_occurrence_rate outside [0, 1]");
    }
    for (int c : spec.class_ids) {
      if (c < 0) throw ConfigError("negative class id " + std::to_string(c));
      if (!seen.insert(c).second) {
        throw ConfigError("class " + std::to_string(c) + " appears in more than one task");
      }
    }
  }
  TaskSequence seq;
  seq.specs = specs;
  for (std::size_t t = 0; t < specs.size(); ++t) {
    std::vector<int> others;
    for (std::size_t u = 0; u < specs.size(); ++u)
      if (u != t) others.insert(others.end(), specs[u].class_ids.begin(), specs[u].class_ids.end());
    auto& train = seq.train.emplace_back();
    auto& test = seq.test.emplace_back();
    for (std::size_t i = 0; i < specs[t].scene_count; ++i)
      train.push_back(make_scene(mix_seed(mix_seed(seed, 2 * t), i), specs[t], others, options));
    for (std::size_t i = 0; i < options.eval_scenes_per_task; ++i)
      test.push_back(make_scene(mix_seed(mix_seed(seed, 2 * t + 1), i), specs[t], others, options));
  }
  return seq;
}

std::string scene_to_json_line(const SyntheticScene& scene) {
  json doc;
  std::vector<int> classes;
  std::vector<std::array<double, 4>> boxes;
  for (const auto& o : scene.objects) {
    classes.push_back(o.class_id);
    boxes.push_back({o.box.cx, o.box.cy, o.box.w, o.box.h});
  }
  doc["class_ids"] = classes;
  doc["boxes"] = boxes;
  doc["labeled_mask"] = scene.labeled_mask;
  doc["seed"] = scene.seed;
  return doc.dump();
}

SyntheticScene scene_from_json_line(const std::string& line) {
  try {
    const json doc = json::parse(line);
    SyntheticScene scene;
    scene.seed = doc.at("seed").get<uint64_t>();
    const auto classes = doc.at("class_ids").get<std::vector<int>>();
    const auto boxes = doc.at("boxes").get<std::vector<std::array<double, 4>>>();
    scene.labeled_mask = doc.at("labeled_mask").get<std::vector<bool>>();
    if (classes.size() != boxes.size() || classes.size() != scene.labeled_mask.size()) {
      throw ConfigError("scene fields class_ids/boxes/labeled_mask differ in length");
    }
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const Box box{boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3]};
      if (!box.valid()) throw ConfigError("scene box " + std::to_string(i) + " has non-positive size");
      scene.objects.push_back(SceneObject{classes[i], box, mix_seed(scene.seed, 100 + i)});
    }
    return scene;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene line: ") + e.what());
  }
}

void DetectorConfig::validate() const {
  if (num_classes == 0) throw ConfigError("detector needs at least one class");
  if (heads == 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (prompt_length == 0 || prompt_length % 2 != 0) throw ConfigError("prompt_length must be positive and even");
  if (hidden_dim == 0 || decoder_layers == 0 || ffn_dim == 0 || query_slots == 0 || raw_feature_dim == 0) {
    throw ConfigError("detector dimensions must be positive");
  }
}

FrozenBackbone::FrozenBackbone(const DetectorConfig& cfg, uint64_t seed)
    : slots_(cfg.query_slots), raw_dim_(cfg.raw_feature_dim), noise_(cfg.feature_noise), jitter_(cfg.box_jitter) {
  Rng rng(seed);
  prototypes_ = random_normal({cfg.num_classes, raw_dim_}, cfg.class_separation, rng);
  projection_ = random_normal({raw_dim_ + 4, cfg.embed_dim}, 1.0 / std::sqrt(static_cast<double>(raw_dim_ + 4)), rng);
  bias_ = random_normal({1, cfg.embed_dim}, 0.1, rng);
}

Proposals FrozenBackbone::propose(const SyntheticScene& scene) const {
  if (scene.objects.size() > slots_) {
    throw ConfigError("scene has " + std::to_string(scene.objects.size()) + " objects for " + std::to_string(slots_) +
                      " query slots");
  }
  Rng rng(mix_seed(scene.seed, 0xB0));
  std::vector<std::size_t> perm(slots_);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  Proposals out;
  out.ref_boxes.assign(slots_, Box{});
  out.slot_object.assign(slots_, -1);
  Tensor input = Tensor::zeros({slots_, raw_dim_ + 4});
  std::normal_distribution<double> noise(0.0, noise_);
  std::normal_distribution<double> jitter(0.0, jitter_);
  for (std::size_t i = 0; i < slots_; ++i) {
    const std::size_t slot = perm[i];
    Box evidence;
    if (i < scene.objects.size()) {
      const auto& obj = scene.objects[i];
      if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= prototypes_.rows()) {
        throw ConfigError("scene class " + std::to_string(obj.class_id) + " outside the detector's class range");
      }
      Rng obj_rng(obj.feature_seed);
      for (std::size_t f = 0; f < raw_dim_; ++f)
        input.at(slot, f) = prototypes_.at(static_cast<std::size_t>(obj.class_id), f) + noise(obj_rng);
      evidence = obj.box;
      Box ref{obj.box.cx + jitter(rng), obj.box.cy + jitter(rng), obj.box.w + jitter(rng), obj.box.h + jitter(rng)};
      ref.w = std::max(ref.w, 0.02);
      ref.h = std::max(ref.h, 0.02);
      out.ref_boxes[slot] = ref;
      out.slot_object[slot] = static_cast<int>(i);
    } else {
      for (std::size_t f = 0; f < raw_dim_; ++f) input.at(slot, f) = noise(rng);
      evidence = random_box(rng);
      out.ref_boxes[slot] = evidence;
    }
    input.at(slot, raw_dim_ + 0) = evidence.cx;
    input.at(slot, raw_dim_ + 1) = evidence.cy;
    input.at(slot, raw_dim_ + 2) = evidence.w;
    input.at(slot, raw_dim_ + 3) = evidence.h;
  }
  const std::size_t D = projection_.cols();
  out.features = Tensor::zeros({slots_, D});
  for (std::size_t s = 0; s < slots_; ++s) {
    for (std::size_t d = 0; d < D; ++d) {
      double acc = bias_[d];
      for (std::size_t f = 0; f < raw_dim_ + 4; ++f) acc += input.at(s, f) * projection_.at(f, d);
      out.features.at(s, d) = acc;
    }
  }
  return out;
}

std::string FrozenBackbone::serialize() const {
  std::string bytes;
  append_bytes(bytes, prototypes_);
  append_bytes(bytes, projection_);
  append_bytes(bytes, bias_);
  return bytes;
}

ToyDetector::ToyDetector(const DetectorConfig& cfg, uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      backbone_(cfg, mix_seed(seed, 11)),
      decoder_([&] {
        Rng gen_rng(mix_seed(seed, 13));
        std::vector<PromptGenerator> gens;
        if (cfg.decoder.use_prompts) {
          for (std::size_t j = 0; j < cfg.decoder_layers; ++j)
            gens.push_back(
                PromptGenerator::random(cfg.embed_dim, cfg.hidden_dim, cfg.prompt_length, cfg.prompt_init_scale, gen_rng));
        }
        Rng layer_rng(mix_seed(seed, 12));
        return build_decoder_stack(cfg.decoder_layers, cfg.embed_dim, cfg.heads, cfg.ffn_dim, std::move(gens),
                                   cfg.decoder, layer_rng);
      }()) {
  Rng rng(mix_seed(seed, 14));
  heads_.class_weight = random_normal({cfg_.embed_dim, cfg_.num_classes + 1}, 0.01, rng);
  heads_.class_bias = Tensor::zeros({1, cfg_.num_classes + 1});
  heads_.box_weight = Tensor::zeros({cfg_.embed_dim, 4});
  heads_.box_bias = Tensor::zeros({1, 4});
}

ParameterVector ToyDetector::prompt_parameters() const {
  ParameterVector pv;
  const auto& gens = decoder_.generators();
  for (std::size_t j = 0; j < gens.size(); ++j) {
    pv.add("layer" + std::to_string(j) + ".W1", gens[j].w1());
    pv.add("layer" + std::to_string(j) + ".W2", gens[j].w2());
  }
  return pv;
}

void ToyDetector::set_prompt_parameters(const ParameterVector& pv) {
  prompt_parameters().require_aligned(pv);
  auto& gens = decoder_.generators();
  for (std::size_t j = 0; j < gens.size(); ++j) {
    gens[j] = PromptGenerator(pv.tensor("layer" + std::to_string(j) + ".W1"),
                              pv.tensor("layer" + std::to_string(j) + ".W2"), cfg_.prompt_length);
  }
}

ParameterVector ToyDetector::head_parameters() const {
  ParameterVector pv;
  pv.add("class_head.weight", heads_.class_weight);
  pv.add("class_head.bias", heads_.class_bias);
  pv.add("box_head.weight", heads_.box_weight);
  pv.add("box_head.bias", heads_.box_bias);
  return pv;
}

void ToyDetector::set_head_parameters(const ParameterVector& pv) {
  head_parameters().require_aligned(pv);
  heads_.class_weight = pv.tensor("class_head.weight");
  heads_.class_bias = pv.tensor("class_head.bias");
  heads_.box_weight = pv.tensor("box_head.weight");
  heads_.box_bias = pv.tensor("box_head.bias");
}

std::size_t ToyDetector::trainable_parameter_count() const {
  return prompt_parameters().total_len() + head_parameters().total_len();
}

uint64_t ToyDetector::frozen_hash() const {
  std::string bytes = backbone_.serialize();
  for (const auto& layer : decoder_.layers()) {
    for (std::size_t m = 0; m < layer.attention.heads; ++m) {
      append_bytes(bytes, layer.attention.query_proj[m]);
      append_bytes(bytes, layer.attention.key_proj[m]);
      append_bytes(bytes, layer.attention.value_proj[m]);
      append_bytes(bytes, layer.attention.output_proj[m]);
    }
    append_bytes(bytes, layer.ffn_in);
    append_bytes(bytes, layer.ffn_out);
  }
  return fnv1a64(bytes);
}

TrainableVars ToyDetector::variables(Tape& tape) const {
  TrainableVars v;
  for (const auto& g : decoder_.generators()) v.generators.push_back(variable_vars(tape, g));
  v.class_weight = tape.variable(heads_.class_weight);
  v.class_bias = tape.variable(heads_.class_bias);
  v.box_weight = tape.variable(heads_.box_weight);
  v.box_bias = tape.variable(heads_.box_bias);
  return v;
}

TrainableVars ToyDetector::constants(Tape& tape) const {
  TrainableVars v;
  for (const auto& g : decoder_.generators()) v.generators.push_back(constant_vars(tape, g));
  v.class_weight = tape.constant(heads_.class_weight);
  v.class_bias = tape.constant(heads_.class_bias);
  v.box_weight = tape.constant(heads_.box_weight);
  v.box_bias = tape.constant(heads_.box_bias);
  return v;
}

ForwardOutput ToyDetector::forward(const Proposals& proposals, const TrainableVars& vars, DecoderTrace* trace) const {
  Tape& tape = *vars.class_weight.tape();
  const Var q_o = tape.constant(proposals.features);
  const Var query = query_function(q_o);
  const Var x = decoder_.forward(q_o, query, vars.generators, trace);
  const Var logits = add_rowwise(matmul(x, vars.class_weight), vars.class_bias);
  Tensor ref = Tensor::zeros({proposals.ref_boxes.size(), 4});
  for (std::size_t s = 0; s < proposals.ref_boxes.size(); ++s) {
    const Box& b = proposals.ref_boxes[s];
    ref.at(s, 0) = b.cx;
    ref.at(s, 1) = b.cy;
    ref.at(s, 2) = b.w;
    ref.at(s, 3) = b.h;
  }
  const Var boxes = add(tape.constant(std::move(ref)), add_rowwise(matmul(x, vars.box_weight), vars.box_bias));
  return ForwardOutput{logits, boxes};
}

std::vector<Detection> ToyDetector::infer(const Proposals& proposals) const {
  Tape tape;
  const auto out = forward(proposals, constants(tape), nullptr);
  const Tensor& probs = softmax(out.logits, 1).value();
  const Tensor& boxes = out.boxes.value();
  std::vector<Detection> dets;
  dets.reserve(probs.rows());
  for (std::size_t s = 0; s < probs.rows(); ++s) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cfg_.num_classes; ++c)
      if (probs.at(s, c) > probs.at(s, best)) best = c;
    Detection d;
    d.class_id = static_cast<int>(best);
    d.score = probs.at(s, best);
    d.box = Box{boxes.at(s, 0), boxes.at(s, 1), std::max(boxes.at(s, 2), 1e-3), std::max(boxes.at(s, 3), 1e-3)};
    dets.push_back(d);
  }
  return dets;
}

std::vector<std::vector<double>> ToyDetector::layer_prompts(const SyntheticScene& scene) const {
  Tape tape;
  DecoderTrace trace;
  forward(propose(scene), constants(tape), &trace);
  std::vector<std::vector<double>> out;
  for (const auto& p : trace.prompts) out.push_back(p.values());
  return out;
}

std::vector<int> assign_targets(std::span<const Box> predicted, const Tensor& class_probs,
                                std::span<const Target> targets, double min_iou) {
  struct Candidate {
    double overlap;
    double prob;
    std::size_t slot;
    std::size_t target;
  };
  std::vector<Candidate> cands;
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double o = iou(predicted[s], targets[t].box);
      if (o < min_iou) continue;
      const double p = class_probs.at(s, static_cast<std::size_t>(targets[t].class_id));
      cands.push_back({o, p, s, t});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    if (a.prob != b.prob) return a.prob > b.prob;
    if (a.slot != b.slot) return a.slot < b.slot;
    return a.target < b.target;
  });
  std::vector<int> assignment(predicted.size(), -1);
  std::vector<bool> taken(targets.size(), false);
  for (const auto& c : cands) {
    if (assignment[c.slot] >= 0 || taken[c.target]) continue;
    assignment[c.slot] = static_cast<int>(c.target);
    taken[c.target] = true;
  }
  return assignment;
}

}  // namespace prompt_evolve
