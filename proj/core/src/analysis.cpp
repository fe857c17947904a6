#include "prompt_evolve/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/incremental.hpp"
#include "prompt_evolve/parallel.hpp"

namespace prompt_evolve {

namespace {

double squared_distance(const std::vector<double>& x, const std::vector<double>& y) {
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    d += diff * diff;
  }
  return d;
}

void check_samples(const SampleSet& a, const SampleSet& b) {
  if (a.empty() || b.empty()) throw DimensionError("mmd2 needs non-empty sample sets");
  const std::size_t dim = a.front().size();
  for (const auto* set : {&a, &b})
    for (const auto& x : *set)
      if (x.size() != dim) {
        throw DimensionError("mmd2 samples of dimension " + std::to_string(x.size()) + " and " + std::to_string(dim));
      }
}

double sorted_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

double kernel_mean(const SampleSet& x, const SampleSet& y, double inv_two_sigma2) {
  std::vector<double> values;
  values.reserve(x.size() * y.size());
  for (const auto& xi : x)
    for (const auto& yj : y) values.push_back(std::exp(-squared_distance(xi, yj) * inv_two_sigma2));
  return sorted_sum(values) / static_cast<double>(values.size());
}

}  // namespace

double median_heuristic_bandwidth(const SampleSet& a, const SampleSet& b) {
  check_samples(a, b);
  std::vector<const std::vector<double>*> pooled;
  for (const auto& x : a) pooled.push_back(&x);
  for (const auto& x : b) pooled.push_back(&x);
  std::vector<double> dists;
  dists.reserve(pooled.size() * (pooled.size() - 1) / 2);
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) dists.push_back(std::sqrt(squared_distance(*pooled[i], *pooled[j])));
  if (dists.empty()) return 1.0;
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double median = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (lower + median);
  }
  return median > 0.0 ? median : 1.0;
}

double mmd2(const SampleSet& a, const SampleSet& b, const MmdConfig& cfg) {
  check_samples(a, b);
  const double sigma = cfg.bandwidth ? *cfg.bandwidth : median_heuristic_bandwidth(a, b);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("MMD bandwidth must be positive");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const double kaa = kernel_mean(a, a, inv);
  const double kbb = kernel_mean(b, b, inv);
  const double kab = kernel_mean(a, b, inv);
  return std::max(0.0, (kaa + kbb) - 2.0 * kab);
}

double a_mmd(std::span<const SampleSet> per_task, const MmdConfig& cfg) {
  if (per_task.size() < 2) throw ConfigError("A-MMD needs at least two tasks");
  std::vector<double> pairs;
  for (std::size_t i = 0; i < per_task.size(); ++i)
    for (std::size_t j = i + 1; j < per_task.size(); ++j) pairs.push_back(mmd2(per_task[i], per_task[j], cfg));
  const double n = static_cast<double>(pairs.size());
  return sorted_sum(pairs) / n;
}

// ---------------------------------------------------------------------------

SweepGrid parse_sweep_grid(const std::string& name) {
  if (name == "table7") return SweepGrid::FusionThresholds;
  if (name == "table8") return SweepGrid::Lambda;
  if (name == "dim") return SweepGrid::HiddenDim;
  throw ConfigError("unknown sweep grid '" + name + "' (expected table7, table8 or dim)");
}

std::string sweep_csv_name(SweepGrid grid) {
  switch (grid) {
    case SweepGrid::FusionThresholds:
      return "table7_fusion.csv";
    case SweepGrid::Lambda:
      return "table8_lambda.csv";
    case SweepGrid::HiddenDim:
      return "fig3_dim_sweep.csv";
  }
  return "sweep.csv";
}

namespace {

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string fmt_ap(const std::optional<double>& v) {
  if (!v) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

std::vector<SweepCell> fusion_threshold_cells(const RunConfig& base) {
  std::vector<SweepCell> cells;
  RunConfig off = base;
  off.ablation.fusion = false;
  cells.push_back({"no_fusion", off});
  const std::pair<double, double> grid[] = {{0.0, 0.0}, {0.0, 0.3}, {0.0, 0.7}, {0.3, 0.3},
                                            {0.3, 0.7}, {0.7, 0.3}, {0.7, 0.7}};
  for (const auto& [k, l] : grid) {
    RunConfig cfg = base;
    cfg.ablation.fusion = true;
    cfg.training.fusion = FusionConfig{k, l};
    cells.push_back({"k" + fmt_value(k) + "_l" + fmt_value(l), cfg});
  }
  RunConfig all_prev = base;
  all_prev.ablation.fusion = true;
  all_prev.training.fusion = FusionConfig{1.0, 0.0};
  cells.push_back({"k1", all_prev});
  return cells;
}

std::vector<SweepCell> lambda_cells(const RunConfig& base, std::span<const double> lambdas) {
  std::vector<SweepCell> cells;
  for (double lambda : lambdas) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda values must be non-negative");
    RunConfig cfg = base;
    cfg.ablation.sparse_loss = true;
    cfg.training.lambda_sparse = lambda;
    cells.push_back({"lambda" + fmt_value(lambda), cfg});
  }
  return cells;
}

std::vector<SweepCell> hidden_dim_cells(const RunConfig& base, std::span<const std::size_t> dims) {
  std::vector<SweepCell> cells;
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("hidden_dim values must be positive");
    RunConfig cfg = base;
    cfg.detector.hidden_dim = d;
    cells.push_back({"hidden" + std::to_string(d), cfg});
  }
  return cells;
}

std::vector<SweepCell> sweep_cells(SweepGrid grid, const RunConfig& base) {
  switch (grid) {
    case SweepGrid::FusionThresholds:
      return fusion_threshold_cells(base);
    case SweepGrid::Lambda:
      return lambda_cells(base, kLambdaGrid);
    case SweepGrid::HiddenDim:
      return hidden_dim_cells(base, kHiddenDimGrid);
  }
  return {};
}

std::vector<SweepRow> run_sweep(std::span<const SweepCell> cells, std::size_t threads) {
  std::vector<SweepRow> rows(cells.size());
  parallel_for(
      cells.size(),
      [&](std::size_t i) {
        const RunResult r = run_incremental(cells[i].config);
        SweepRow& row = rows[i];
        row.cell = cells[i];
        row.ap_all = r.final_ap("all");
        row.ap_previous = r.final_ap("previous");
        row.ap_current = r.final_ap("current");
        row.trainable_parameters = r.trainable_parameters;
        const auto& prompts = r.final_prompts().params;
        row.near_zero_fraction = prompts.empty() ? 0.0 : sparsity_report(prompts, kNearZeroEps);
      },
      threads);
  return rows;
}

std::string sweep_table_csv(SweepGrid grid, std::span<const SweepRow> rows) {
  std::ostringstream os;
  switch (grid) {
    case SweepGrid::FusionThresholds:
      os << "config,fusion,top_k,top_l,ap50_all,ap50_previous,ap50_current\n";
      for (const auto& r : rows) {
        const auto& c = r.cell.config;
        const bool on = c.ablation.fusion;
        const bool all_prev = on && c.training.fusion.top_k >= 1.0;
        os << r.cell.label << ',' << (on ? 1 : 0) << ',' << (on ? fmt_value(c.training.fusion.top_k) : "") << ','
           << (on && !all_prev ? fmt_value(c.training.fusion.top_l) : "") << ',' << fmt_ap(r.ap_all) << ','
           << fmt_ap(r.ap_previous) << ',' << fmt_ap(r.ap_current) << '\n';
      }
      break;
    case SweepGrid::Lambda:
      os << "lambda,ap50_all,ap50_previous,ap50_current,near_zero_fraction\n";
      for (const auto& r : rows) {
        char frac[32];
        std::snprintf(frac, sizeof frac, "%.6f", r.near_zero_fraction);
        os << fmt_value(r.cell.config.training.lambda_sparse) << ',' << fmt_ap(r.ap_all) << ','
           << fmt_ap(r.ap_previous) << ',' << fmt_ap(r.ap_current) << ',' << frac << '\n';
      }
      break;
    case SweepGrid::HiddenDim:
      os << "hidden_dim,trainable_parameters,ap50_all,ap50_previous,ap50_current\n";
      for (const auto& r : rows) {
        os << r.cell.config.detector.hidden_dim << ',' << r.trainable_parameters << ',' << fmt_ap(r.ap_all) << ','
           << fmt_ap(r.ap_previous) << ',' << fmt_ap(r.ap_current) << '\n';
      }
      break;
  }
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

struct RunContext {
  RunConfig config;
  TaskSequence sequence;
};

RunContext load_run(const std::filesystem::path& run_dir) {
  RunConfig cfg = load_run_config(run_dir / "config.json");
  if (!cfg.ablation.prompts) throw ConfigError(run_dir.string() + " was trained without prompts");
  TaskSequence seq = build_task_sequence(cfg);
  return RunContext{std::move(cfg), std::move(seq)};
}

}  // namespace

std::vector<double> ammd_per_layer(const std::filesystem::path& run_dir, std::size_t scenes_per_task) {
  const RunContext run = load_run(run_dir);
  const std::size_t tasks = run.config.tasks.size();
  const std::size_t layers = run.config.detector.decoder_layers;
  // samples[layer][task]
  std::vector<std::vector<SampleSet>> samples(layers, std::vector<SampleSet>(tasks));
  for (std::size_t t = 0; t < tasks; ++t) {
    const ToyDetector model = load_detector_for_task(run_dir, run.config, run.config.tasks[t].task_id);
    const auto& scenes = run.sequence.test[t];
    const std::size_t n = std::min(scenes_per_task, scenes.size());
    std::vector<std::vector<std::vector<double>>> prompts(n);
    parallel_for(n, [&](std::size_t i) { prompts[i] = model.layer_prompts(scenes[i]); });
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < layers; ++j) samples[j][t].push_back(std::move(prompts[i][j]));
  }
  std::vector<double> out(layers);
  for (std::size_t j = 0; j < layers; ++j) out[j] = a_mmd(samples[j]);
  return out;
}

std::string ammd_csv(std::span<const double> per_layer) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,a_mmd\n";
  for (std::size_t j = 0; j < per_layer.size(); ++j) os << j + 1 << ',' << per_layer[j] << '\n';
  return os.str();
}

std::vector<std::vector<double>> prompt_similarity(const std::filesystem::path& run_dir, std::size_t scenes_per_task) {
  const RunContext run = load_run(run_dir);
  const std::size_t tasks = run.config.tasks.size();
  const std::size_t dim = run.config.detector.embed_dim;
  std::vector<FeatureSet> objects(tasks), prompts(tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    const ToyDetector model = load_detector_for_task(run_dir, run.config, run.config.tasks[t].task_id);
    const auto& scenes = run.sequence.test[t];
    const auto& classes = run.config.tasks[t].class_ids;
    const std::size_t n = std::min(scenes_per_task, scenes.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& scene = scenes[i];
      const Proposals props = model.propose(scene);
      for (std::size_t s = 0; s < props.slot_object.size(); ++s) {
        const int obj = props.slot_object[s];
        if (obj < 0) continue;
        const int cls = scene.objects[static_cast<std::size_t>(obj)].class_id;
        if (std::find(classes.begin(), classes.end(), cls) == classes.end()) continue;
        const auto row = props.features.data().subspan(s * dim, dim);
        objects[t].emplace_back(row.begin(), row.end());
      }
      const auto layer_prompts = model.layer_prompts(scene);
      const auto& last = layer_prompts.back();
      for (std::size_t r = 0; r + dim <= last.size(); r += dim)
        prompts[t].emplace_back(last.begin() + static_cast<std::ptrdiff_t>(r),
                                last.begin() + static_cast<std::ptrdiff_t>(r + dim));
    }
  }
  return similarity_heatmap(objects, prompts);
}

}  // namespace prompt_evolve
