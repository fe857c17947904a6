#include "prompt_evolve/incremental.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/optimizer.hpp"
#include "prompt_evolve/parallel.hpp"

namespace prompt_evolve {

Var detection_loss(Var logits, Var boxes, std::span<const int> assignment, std::span<const Target> targets,
                   std::size_t no_object_class, const LossOptions& options) {
  Tape& tape = *logits.tape();
  const std::size_t n = logits.value().rows();
  const std::size_t k = logits.value().cols();
  if (assignment.size() != n) {
    throw DimensionError("detection_loss: " + std::to_string(assignment.size()) + " assignments for " +
                         std::to_string(n) + " slots");
  }
  if (no_object_class >= k) throw DimensionError("detection_loss: no-object class outside the logit width");
  Tensor onehot = Tensor::zeros({n, k});
  Tensor target_boxes = Tensor::zeros({n, 4});
  Tensor mask = Tensor::zeros({n, 4});
  std::size_t matched = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const int a = assignment[s];
    if (a < 0) {
      onehot.at(s, no_object_class) = 1.0;
      continue;
    }
    const Target& t = targets[static_cast<std::size_t>(a)];
    if (t.class_id < 0 || static_cast<std::size_t>(t.class_id) >= no_object_class) {
      throw DimensionError("detection_loss: target class " + std::to_string(t.class_id) + " out of range");
    }
    onehot.at(s, static_cast<std::size_t>(t.class_id)) = 1.0;
    const double b[4] = {t.box.cx, t.box.cy, t.box.w, t.box.h};
    for (std::size_t c = 0; c < 4; ++c) {
      target_boxes.at(s, c) = b[c];
      mask.at(s, c) = 1.0;
    }
    ++matched;
  }
  const Var probs = softmax(logits, 1);
  const Var p = sum_cols(mul(probs, tape.constant(std::move(onehot))));
  const Var modulator = pow_scalar(add_scalar(scale(p, -1.0), 1.0), options.focal_gamma);
  const Var focal = scale(mul(modulator, log(add_scalar(p, options.log_floor))), -options.focal_alpha);
  Var loss = mean(focal);
  if (matched > 0 && options.box_weight > 0.0) {
    const Var diff = mul(sub(boxes, tape.constant(std::move(target_boxes))), tape.constant(std::move(mask)));
    loss = add(loss, scale(abs_sum(diff), options.box_weight / static_cast<double>(4 * matched)));
  }
  return loss;
}

Var detection_loss(const ForwardOutput& out, std::span<const Target> targets, std::size_t no_object_class,
                   const LossOptions& options, std::vector<int>* assignment) {
  const Tensor probs = softmax(out.logits, 1).value();
  const Tensor& box_values = out.boxes.value();
  std::vector<Box> predicted(box_values.rows());
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    predicted[s] = Box{box_values.at(s, 0), box_values.at(s, 1), std::max(box_values.at(s, 2), 1e-6),
                       std::max(box_values.at(s, 3), 1e-6)};
  }
  const auto assigned = assign_targets(predicted, probs, targets);
  if (assignment) *assignment = assigned;
  return detection_loss(out.logits, out.boxes, assigned, targets, no_object_class, options);
}

std::vector<TrainingExample> build_training_set(const ToyDetector& model, std::span<const SyntheticScene> scenes,
                                                std::span<const int> current_classes, const ToyDetector* labeler,
                                                double tau) {
  std::vector<TrainingExample> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& scene = scenes[i];
    out[i].proposals = model.propose(scene);
    const auto ground_truth = scene.labeled_targets();
    if (!labeler) {
      out[i].targets = ground_truth;
      return;
    }
    const auto dets = suppress_duplicates(labeler->infer(scene));
    const auto pseudo = pseudo_label(dets, tau);
    out[i].targets = merge_labels(ground_truth, pseudo, current_classes);
  });
  return out;
}

namespace {

struct TrainableTensors {
  std::vector<Tensor> prompts;  // W1, W2 per layer, interleaved
  HeadParams heads;

  TrainableVars on_tape(Tape& tape) const {
    TrainableVars v;
    for (std::size_t i = 0; i + 1 < prompts.size(); i += 2)
      v.generators.push_back(GeneratorVars{tape.variable(prompts[i]), tape.variable(prompts[i + 1])});
    v.class_weight = tape.variable(heads.class_weight);
    v.class_bias = tape.variable(heads.class_bias);
    v.box_weight = tape.variable(heads.box_weight);
    v.box_bias = tape.variable(heads.box_bias);
    return v;
  }
};

double l1_norm(const std::vector<Tensor>& tensors) {
  double total = 0.0;
  for (const auto& t : tensors)
    for (double v : t.data()) total += std::fabs(v);
  return total;
}

}  // namespace

TrainStats train_task(ToyDetector& model, std::span<const TrainingExample> examples, const TrainingConfig& cfg,
                      double lambda_sparse, uint64_t shuffle_seed) {
  cfg.validate();
  TrainStats stats;
  TrainableTensors params;
  const ParameterVector prompt_pv = model.prompt_parameters();
  for (const auto& e : prompt_pv.entries()) params.prompts.push_back(prompt_pv.tensor(e.name));
  params.heads = model.heads();

  const LossOptions loss_opts{cfg.focal_alpha, cfg.focal_gamma, cfg.box_loss_weight};
  const std::size_t n_prompt = params.prompts.size();
  Optimizer opt(cfg.optimizer, n_prompt + 4);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    const double factor = epoch >= cfg.lr_drop_epoch ? cfg.lr_drop_factor : 1.0;
    const double lr_main = cfg.learning_rate_main * factor;
    const double lr_box = cfg.learning_rate_box * factor;
    Rng rng(mix_seed(shuffle_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      Tape tape;
      const TrainableVars vars = params.on_tape(tape);
      Var loss;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& ex = examples[order[i]];
        const Var l = detection_loss(model.forward(ex.proposals, vars), ex.targets, model.no_object_class(), loss_opts);
        loss = i == begin ? l : add(loss, l);
      }
      loss = scale(loss, 1.0 / static_cast<double>(end - begin));
      if (lambda_sparse > 0.0 && !vars.generators.empty()) {
        std::vector<Var> prompt_vars;
        for (const auto& g : vars.generators) {
          prompt_vars.push_back(g.w1);
          prompt_vars.push_back(g.w2);
        }
        loss = add(loss, sparse_loss(prompt_vars, lambda_sparse));
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at step " + std::to_string(stats.steps) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      tape.backward(loss);
      opt.begin_step();
      std::size_t slot = 0;
      for (const auto& g : vars.generators) {
        opt.step(slot, params.prompts[slot], tape.grad(g.w1).data(), lr_main);
        ++slot;
        opt.step(slot, params.prompts[slot], tape.grad(g.w2).data(), lr_main);
        ++slot;
      }
      opt.step(n_prompt + 0, params.heads.class_weight, tape.grad(vars.class_weight).data(), lr_main);
      opt.step(n_prompt + 1, params.heads.class_bias, tape.grad(vars.class_bias).data(), lr_main);
      opt.step(n_prompt + 2, params.heads.box_weight, tape.grad(vars.box_weight).data(), lr_box);
      opt.step(n_prompt + 3, params.heads.box_bias, tape.grad(vars.box_bias).data(), lr_box);
      loss_total += value;
      ++batches;
      ++stats.steps;
    }
    stats.epoch_loss.push_back(batches ? loss_total / static_cast<double>(batches) : 0.0);
    stats.prompt_l1.push_back(l1_norm(params.prompts));
  }

  std::vector<double> flat;
  for (const auto& t : params.prompts) flat.insert(flat.end(), t.data().begin(), t.data().end());
  model.set_prompt_parameters(prompt_pv.with_values(flat));
  model.heads() = params.heads;
  return stats;
}

ApReport evaluate(const ToyDetector& model, std::span<const SyntheticScene* const> scenes,
                  std::span<const int> classes) {
  std::vector<std::vector<Detection>> dets(scenes.size());
  std::vector<std::vector<Target>> gts(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    dets[i] = suppress_duplicates(model.infer(*scenes[i]));
    gts[i] = scenes[i]->targets_for(classes);
  });
  return compute_ap50(dets, gts, classes);
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::ostringstream os;
  os << "task,stage,class_group,ap50\n";
  char buf[64];
  for (const auto& r : rows) {
    if (r.ap50) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.ap50);
    } else {
      std::snprintf(buf, sizeof buf, "nan");
    }
    os << r.task << ',' << stage_name(r.stage) << ',' << r.class_group << ',' << buf << '\n';
  }
  return os.str();
}

const Checkpoint& RunResult::final_prompts() const {
  if (tasks.empty()) return init;
  const auto& last = tasks.back();
  return last.fused ? *last.fused : last.trained;
}

std::optional<double> RunResult::final_ap(const std::string& class_group) const {
  if (tasks.empty()) return std::nullopt;
  const int last = tasks.back().task_id;
  for (const auto& r : metrics)
    if (r.task == last && r.class_group == class_group) return r.ap50;
  return std::nullopt;
}

DetectorConfig effective_detector_config(const RunConfig& cfg) {
  DetectorConfig d = cfg.detector;
  d.decoder.use_prompts = cfg.ablation.prompts;
  return d;
}

ToyDetector build_detector(const RunConfig& cfg) { return ToyDetector(effective_detector_config(cfg), mix_seed(cfg.seed, 1)); }

TaskSequence build_task_sequence(const RunConfig& cfg) {
  return generate_task_sequence(mix_seed(cfg.seed, 2), cfg.tasks, cfg.scenes);
}

RunResult run_incremental(const RunConfig& cfg) {
  cfg.validate();
  RunResult result;
  result.config = cfg;
  ToyDetector model = build_detector(cfg);
  const TaskSequence seq = build_task_sequence(cfg);
  result.init = Checkpoint{0, Stage::Init, model.prompt_parameters()};
  result.init_heads = Checkpoint{0, Stage::Init, model.head_parameters()};
  result.trainable_parameters = model.trainable_parameter_count();
  const double lambda = cfg.ablation.sparse_loss ? cfg.training.lambda_sparse : 0.0;

  std::optional<ToyDetector> previous;
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
    const auto& spec = cfg.tasks[t];
    TaskRecord rec;
    rec.task_id = spec.task_id;
    rec.frozen_hash_before = model.frozen_hash();
    if (t > 0 && !cfg.ablation.warm_start_heads) model.set_head_parameters(result.init_heads.params);

    const ToyDetector* labeler = cfg.ablation.pseudo_labeling && previous ? &*previous : nullptr;
    const auto examples = build_training_set(model, seq.train[t], spec.class_ids, labeler, cfg.training.tau_pseudo);
    for (std::size_t i = 0; i < examples.size(); ++i)
      rec.pseudo_labels_added += examples[i].targets.size() - seq.train[t][i].labeled_targets().size();

    const ParameterVector theta_prev = model.prompt_parameters();
    rec.stats = train_task(model, examples, cfg.training, lambda, mix_seed(cfg.seed, 100 + t));
    const ParameterVector theta_trained = model.prompt_parameters();
    rec.trained = Checkpoint{spec.task_id, Stage::Trained, theta_trained};
    rec.heads = Checkpoint{spec.task_id, Stage::Trained, model.head_parameters()};

    if (t > 0 && cfg.ablation.fusion && !theta_trained.empty()) {
      auto fused = fuse(theta_trained, theta_prev, result.init.params, cfg.training.fusion);
      model.set_prompt_parameters(fused.fused);
      rec.fused = Checkpoint{spec.task_id, Stage::Fused, std::move(fused.fused)};
      rec.audit = std::move(fused.audit);
      rec.evaluated = Stage::Fused;
    }

    std::vector<const SyntheticScene*> scenes;
    for (std::size_t u = 0; u <= t; ++u)
      for (const auto& s : seq.test[u]) scenes.push_back(&s);
    const auto seen = cfg.classes_up_to(t + 1);
    const auto previous_classes = cfg.classes_up_to(t);
    const ApReport report = evaluate(model, scenes, seen);
    result.metrics.push_back(MetricRow{spec.task_id, rec.evaluated, "current", mean_ap(report, spec.class_ids)});
    if (t > 0) result.metrics.push_back(MetricRow{spec.task_id, rec.evaluated, "previous", mean_ap(report, previous_classes)});
    result.metrics.push_back(MetricRow{spec.task_id, rec.evaluated, "all", report.mean});

    rec.frozen_hash_after = model.frozen_hash();
    result.tasks.push_back(std::move(rec));
    previous.emplace(model);
  }
  return result;
}

namespace {

std::string hex64(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int task, const char* suffix) {
  return dir / "checkpoints" / ("task" + std::to_string(task) + "_" + suffix + ".json");
}

}  // namespace

void write_run_directory(const std::filesystem::path& dir, const RunResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create " + (dir / "checkpoints").string() + ": " + ec.message());
  write_text_file_atomic(dir / "config.json", run_config_to_json(result.config));
  write_text_file_atomic(dir / "metrics.csv", metrics_csv(result.metrics));
  write_checkpoint(dir / "checkpoints" / "init.json", result.init);
  write_checkpoint(dir / "checkpoints" / "init_heads.json", result.init_heads);
  nlohmann::json summary;
  summary["trainable_parameters"] = result.trainable_parameters;
  summary["final_prompt_near_zero_fraction"] =
      result.final_prompts().params.empty() ? 0.0 : sparsity_report(result.final_prompts().params, 1e-4);
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& rec : result.tasks) {
    write_checkpoint(checkpoint_path(dir, rec.task_id, "trained"), rec.trained);
    if (rec.fused) write_checkpoint(checkpoint_path(dir, rec.task_id, "fused"), *rec.fused);
    write_checkpoint(checkpoint_path(dir, rec.task_id, "heads"), rec.heads);
    nlohmann::json t;
    t["task_id"] = rec.task_id;
    t["evaluated_stage"] = std::string(stage_name(rec.evaluated));
    t["frozen_hash_before"] = hex64(rec.frozen_hash_before);
    t["frozen_hash_after"] = hex64(rec.frozen_hash_after);
    t["pseudo_labels_added"] = rec.pseudo_labels_added;
    t["training_steps"] = rec.stats.steps;
    t["final_epoch_loss"] = rec.stats.epoch_loss.empty() ? 0.0 : rec.stats.epoch_loss.back();
    if (rec.audit) {
      t["fusion_audit"] = {{"preserved_prev", rec.audit->preserved_prev},
                           {"preserved_curr", rec.audit->preserved_curr},
                           {"averaged", rec.audit->averaged},
                           {"fallback", rec.audit->fallback}};
    }
    tasks.push_back(t);
  }
  summary["tasks"] = tasks;
  write_text_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
}

ToyDetector load_detector_for_task(const std::filesystem::path& dir, const RunConfig& cfg, int task) {
  ToyDetector model = build_detector(cfg);
  const auto fused = checkpoint_path(dir, task, "fused");
  const auto prompts = read_checkpoint(std::filesystem::exists(fused) ? fused : checkpoint_path(dir, task, "trained"));
  if (prompts.task_id != task) {
    throw ConfigError("checkpoint for task " + std::to_string(task) + " carries task_id " +
                      std::to_string(prompts.task_id));
  }
  model.set_prompt_parameters(prompts.params);
  model.set_head_parameters(read_checkpoint(checkpoint_path(dir, task, "heads")).params);
  return model;
}

}  // namespace prompt_evolve
