#include "prompt_evolve/config.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"

#include "prompt_evolve/checkpoint.hpp"
#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

using nlohmann::json;

void TrainingConfig::validate() const {
  if (!(learning_rate_main > 0.0) || !(learning_rate_box > 0.0)) throw ConfigError("learning rates must be positive");
  if (lr_drop_epoch > epochs_per_task) throw ConfigError("lr_drop_epoch must not exceed epochs_per_task");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
  if (!(lambda_sparse >= 0.0)) throw ConfigError("lambda_sparse must be non-negative");
  if (!(tau_pseudo >= 0.0 && tau_pseudo <= 1.0)) throw ConfigError("tau_pseudo must lie in [0, 1]");
  if (!(focal_alpha > 0.0) || !(focal_gamma >= 0.0)) throw ConfigError("focal_alpha must be positive and focal_gamma non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(box_loss_weight >= 0.0)) throw ConfigError("box_loss_weight must be non-negative");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  fusion.validate();
}

void RunConfig::validate() const {
  detector.validate();
  training.validate();
  if (tasks.empty()) throw ConfigError("config lists no tasks");
  for (const auto& t : tasks)
    for (int c : t.class_ids)
      if (c < 0 || static_cast<std::size_t>(c) >= detector.num_classes) {
        throw ConfigError("task " + std::to_string(t.task_id) + " class " + std::to_string(c) +
                          " outside [0, num_classes)");
      }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      for (int c : tasks[i].class_ids)
        if (std::find(tasks[j].class_ids.begin(), tasks[j].class_ids.end(), c) != tasks[j].class_ids.end()) {
          throw ConfigError("class " + std::to_string(c) + " appears in tasks " + std::to_string(tasks[j].task_id) +
                            " and " + std::to_string(tasks[i].task_id));
        }
  if (scenes.max_labeled + scenes.max_co_occurring > detector.query_slots) {
    throw ConfigError("max_labeled + max_co_occurring exceeds query_slots");
  }
}

std::vector<int> RunConfig::classes_up_to(std::size_t count) const {
  std::vector<int> out;
  for (std::size_t t = 0; t < count && t < tasks.size(); ++t)
    out.insert(out.end(), tasks[t].class_ids.begin(), tasks[t].class_ids.end());
  return out;
}

std::vector<TaskSpec> default_task_specs() {
  std::vector<TaskSpec> specs;
  for (int t = 0; t < 4; ++t) {
    TaskSpec spec;
    spec.task_id = t + 1;
    spec.class_ids = {3 * t, 3 * t + 1, 3 * t + 2};
    specs.push_back(spec);
  }
  return specs;
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.tasks = default_task_specs();
  return cfg;
}

namespace {

// Reads fields from one JSON object, tracking which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  void read_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if (!it->is_number_integer() || it->get<long long>() < 0) {
      throw ConfigError(where(key) + " must be a non-negative integer");
    }
    out = it->get<std::size_t>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!seen_.count(key)) throw ConfigError("unknown field " + where(key));
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void with_field(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void read_detector(const json& j, DetectorConfig& d) {
  ObjectReader r(j, "detector");
  r.read_size("num_classes", d.num_classes);
  r.read_size("embed_dim", d.embed_dim);
  r.read_size("heads", d.heads);
  r.read_size("hidden_dim", d.hidden_dim);
  r.read_size("prompt_length", d.prompt_length);
  r.read_size("decoder_layers", d.decoder_layers);
  r.read_size("ffn_dim", d.ffn_dim);
  r.read_size("query_slots", d.query_slots);
  r.read_size("raw_feature_dim", d.raw_feature_dim);
  r.read("class_separation", d.class_separation);
  r.read("feature_noise", d.feature_noise);
  r.read("box_jitter", d.box_jitter);
  r.read("prompt_init_scale", d.prompt_init_scale);
  r.read("project_prompt_keys", d.decoder.attention.project_prompt_keys);
  r.read("project_prompt_values", d.decoder.attention.project_prompt_values);
  r.read("positional_embedding", d.decoder.positional_embedding);
  r.finish();
  with_field("detector", [&] { d.validate(); });
}

void read_scenes(const json& j, SceneOptions& s) {
  ObjectReader r(j, "scenes");
  r.read_size("max_labeled", s.max_labeled);
  r.read_size("max_co_occurring", s.max_co_occurring);
  r.read_size("eval_scenes_per_task", s.eval_scenes_per_task);
  r.finish();
}

std::vector<TaskSpec> read_tasks(const json& j) {
  if (!j.is_array()) throw ConfigError("tasks must be an array");
  std::vector<TaskSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    ObjectReader r(j[i], "tasks[" + std::to_string(i) + "]");
    TaskSpec spec;
    spec.task_id = static_cast<int>(i) + 1;
    r.read("task_id", spec.task_id);
    r.read("class_ids", spec.class_ids);
    r.read_size("scene_count", spec.scene_count);
    r.read("co_occurrence_rate", spec.co_occurrence_rate);
    r.finish();
    if (spec.class_ids.empty()) throw ConfigError(r.where("class_ids") + " must not be empty");
    if (!(spec.co_occurrence_rate >= 0.0 && spec.co_occurrence_rate <= 1.0)) {
      throw ConfigError(r.where("co_occurrence_rate") + " must lie in [0, 1]");
    }
    out.push_back(std::move(spec));
  }
  return out;
}

void read_training(const json& j, TrainingConfig& t) {
  ObjectReader r(j, "training");
  r.read("learning_rate_main", t.learning_rate_main);
  r.read("learning_rate_box", t.learning_rate_box);
  r.read_size("epochs_per_task", t.epochs_per_task);
  r.read_size("lr_drop_epoch", t.lr_drop_epoch);
  r.read("lr_drop_factor", t.lr_drop_factor);
  r.read("lambda_sparse", t.lambda_sparse);
  r.read("tau_pseudo", t.tau_pseudo);
  r.read("focal_alpha", t.focal_alpha);
  r.read("focal_gamma", t.focal_gamma);
  r.read_size("batch_size", t.batch_size);
  r.read("box_loss_weight", t.box_loss_weight);
  std::string optimizer(optimizer_name(t.optimizer.kind));
  r.read("optimizer", optimizer);
  with_field(r.where("optimizer"), [&] { t.optimizer.kind = parse_optimizer(optimizer); });
  r.read("weight_decay", t.optimizer.weight_decay);
  if (const json* f = r.child("fusion")) {
    ObjectReader fr(*f, "training.fusion");
    fr.read("top_k", t.fusion.top_k);
    fr.read("top_l", t.fusion.top_l);
    fr.finish();
  }
  r.finish();
  with_field("training", [&] { t.validate(); });
}

void read_ablation(const json& j, AblationToggles& a) {
  ObjectReader r(j, "ablation");
  r.read("pseudo_labeling", a.pseudo_labeling);
  r.read("prompts", a.prompts);
  r.read("fusion", a.fusion);
  r.read("sparse_loss", a.sparse_loss);
  r.read("warm_start_heads", a.warm_start_heads);
  r.finish();
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg = default_run_config();
  ObjectReader r(doc, "");
  r.read("seed", cfg.seed);
  if (const json* d = r.child("detector")) read_detector(*d, cfg.detector);
  if (const json* s = r.child("scenes")) read_scenes(*s, cfg.scenes);
  if (const json* t = r.child("tasks")) cfg.tasks = read_tasks(*t);
  if (const json* t = r.child("training")) read_training(*t, cfg.training);
  if (const json* a = r.child("ablation")) read_ablation(*a, cfg.ablation);
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text_file(path));
}

std::string run_config_to_json(const RunConfig& cfg) {
  const auto& d = cfg.detector;
  const auto& t = cfg.training;
  json doc;
  doc["seed"] = cfg.seed;
  doc["detector"] = {{"num_classes", d.num_classes},
                     {"embed_dim", d.embed_dim},
                     {"heads", d.heads},
                     {"hidden_dim", d.hidden_dim},
                     {"prompt_length", d.prompt_length},
                     {"decoder_layers", d.decoder_layers},
                     {"ffn_dim", d.ffn_dim},
                     {"query_slots", d.query_slots},
                     {"raw_feature_dim", d.raw_feature_dim},
                     {"class_separation", d.class_separation},
                     {"feature_noise", d.feature_noise},
                     {"box_jitter", d.box_jitter},
                     {"prompt_init_scale", d.prompt_init_scale},
                     {"project_prompt_keys", d.decoder.attention.project_prompt_keys},
                     {"project_prompt_values", d.decoder.attention.project_prompt_values},
                     {"positional_embedding", d.decoder.positional_embedding}};
  doc["scenes"] = {{"max_labeled", cfg.scenes.max_labeled},
                   {"max_co_occurring", cfg.scenes.max_co_occurring},
                   {"eval_scenes_per_task", cfg.scenes.eval_scenes_per_task}};
  json tasks = json::array();
  for (const auto& spec : cfg.tasks) {
    tasks.push_back({{"task_id", spec.task_id},
                     {"class_ids", spec.class_ids},
                     {"scene_count", spec.scene_count},
                     {"co_occurrence_rate", spec.co_occurrence_rate}});
  }
  doc["tasks"] = tasks;
  doc["training"] = {{"learning_rate_main", t.learning_rate_main},
                     {"learning_rate_box", t.learning_rate_box},
                     {"epochs_per_task", t.epochs_per_task},
                     {"lr_drop_epoch", t.lr_drop_epoch},
                     {"lr_drop_factor", t.lr_drop_factor},
                     {"lambda_sparse", t.lambda_sparse},
                     {"tau_pseudo", t.tau_pseudo},
                     {"focal_alpha", t.focal_alpha},
                     {"focal_gamma", t.focal_gamma},
                     {"batch_size", t.batch_size},
                     {"box_loss_weight", t.box_loss_weight},
                     {"optimizer", std::string(optimizer_name(t.optimizer.kind))},
                     {"weight_decay", t.optimizer.weight_decay},
                     {"fusion", {{"top_k", t.fusion.top_k}, {"top_l", t.fusion.top_l}}}};
  doc["ablation"] = {{"pseudo_labeling", cfg.ablation.pseudo_labeling},
                     {"prompts", cfg.ablation.prompts},
                     {"fusion", cfg.ablation.fusion},
                     {"sparse_loss", cfg.ablation.sparse_loss},
                     {"warm_start_heads", cfg.ablation.warm_start_heads}};
  return doc.dump(2) + "\n";
}

}  // namespace prompt_evolve
