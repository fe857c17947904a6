#include "cli.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "prompt_evolve/analysis.hpp"
#include "prompt_evolve/checkpoint.hpp"
#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/gradient_suite.hpp"
#include "prompt_evolve/incremental.hpp"
#include "prompt_evolve/parallel.hpp"

namespace prompt_evolve::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<double> top_k;
  std::optional<double> top_l;
  std::optional<double> tau;
  std::optional<double> lambda;
};

struct Options {
  std::string config;
  std::string out;
  bool force = false;
  Overrides overrides;
  // fuse
  std::string prev, current, init;
  // sweep
  std::string grid;
  // analyze
  std::string ammd_dir;
  // gradcheck
  std::size_t points = 20;
  // pseudo-label
  std::string detections;
};

void add_overrides(CLI::App* cmd, Overrides& o, bool fusion, bool training) {
  cmd->add_option("--seed", o.seed, "Override the configured seed");
  if (fusion) {
    cmd->add_option("--top-k", o.top_k, "Fraction of previous-task parameters preserved");
    cmd->add_option("--top-l", o.top_l, "Fraction of current-task parameters preserved");
  }
  if (training) {
    cmd->add_option("--tau", o.tau, "Pseudo-label score threshold");
    cmd->add_option("--lambda", o.lambda, "Sparse loss weight");
  }
}

RunConfig load_config(const Options& opt) {
  RunConfig cfg = load_run_config(opt.config);
  const Overrides& o = opt.overrides;
  if (o.seed) cfg.seed = *o.seed;
  if (o.top_k) cfg.training.fusion.top_k = *o.top_k;
  if (o.top_l) cfg.training.fusion.top_l = *o.top_l;
  if (o.tau) cfg.training.tau_pseudo = *o.tau;
  if (o.lambda) cfg.training.lambda_sparse = *o.lambda;
  cfg.validate();
  return cfg;
}

fs::path temp_sibling(const fs::path& target, const char* tag) {
  static std::atomic<unsigned> counter{0};
  const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
  return parent / ("." + target.filename().string() + "." + tag + "-" + std::to_string(::getpid()) + "-" +
                   std::to_string(counter++));
}

void refuse_existing(const fs::path& target, bool force) {
  if (fs::exists(target) && !force) {
    throw IoError(target.string() + " already exists; pass --force to overwrite");
  }
}

// Fills a fresh temporary directory, then renames it over `target`.
void publish_directory(const fs::path& target, bool force, const std::function<void(const fs::path&)>& fill) {
  refuse_existing(target, force);
  const fs::path tmp = temp_sibling(target, "tmp");
  std::error_code ec;
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  try {
    fill(tmp);
    if (fs::exists(target)) {
      const fs::path old = temp_sibling(target, "old");
      fs::rename(target, old);
      fs::rename(tmp, target);
      fs::remove_all(old);
    } else {
      fs::rename(tmp, target);
    }
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

std::string fmt_ap(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

int cmd_train(const Options& opt, std::ostream& out) {
  const RunConfig cfg = load_config(opt);
  refuse_existing(opt.out, opt.force);
  const RunResult result = run_incremental(cfg);
  publish_directory(opt.out, opt.force, [&](const fs::path& dir) { write_run_directory(dir, result); });
  for (const auto& row : result.metrics) {
    out << "task " << row.task << " [" << stage_name(row.stage) << "] " << row.class_group << " AP50 "
        << fmt_ap(row.ap50) << '\n';
  }
  out << "wrote " << opt.out << '\n';
  return kExitOk;
}

int cmd_fuse(const Options& opt, std::ostream& out) {
  const Checkpoint prev = read_checkpoint(opt.prev);
  const Checkpoint curr = read_checkpoint(opt.current);
  const Checkpoint init = read_checkpoint(opt.init);
  FusionConfig fc;
  if (opt.overrides.top_k) fc.top_k = *opt.overrides.top_k;
  if (opt.overrides.top_l) fc.top_l = *opt.overrides.top_l;
  fc.validate();
  const fs::path target(opt.out);
  const fs::path audit_path = target.parent_path() / (target.stem().string() + "_audit.json");
  refuse_existing(target, opt.force);
  refuse_existing(audit_path, opt.force);
  const FusionResult result = fuse(curr.params, prev.params, init.params, fc);
  write_checkpoint(target, Checkpoint{curr.task_id, Stage::Fused, result.fused});
  const FusionAudit& a = result.audit;
  json audit = {{"top_k", fc.top_k},
                {"top_l", fc.top_l},
                {"parameters", a.total()},
                {"preserved_prev", a.preserved_prev},
                {"preserved_curr", a.preserved_curr},
                {"averaged", a.averaged},
                {"fallback", a.fallback}};
  write_text_file_atomic(audit_path, audit.dump(2) + "\n");
  out << "fused " << a.total() << " parameters: " << a.preserved_prev << " previous, " << a.preserved_curr
      << " current, " << a.averaged << " averaged, " << a.fallback << " fallback\n";
  return kExitOk;
}

int cmd_sweep(const Options& opt, std::ostream& out) {
  const SweepGrid grid = parse_sweep_grid(opt.grid);
  const RunConfig base = load_config(opt);
  refuse_existing(opt.out, opt.force);
  const auto cells = sweep_cells(grid, base);
  const auto rows = run_sweep(cells, thread_budget());
  const std::string csv = sweep_table_csv(grid, rows);
  std::string metrics = "cell,task,stage,class_group,ap50\n";
  for (const auto& row : rows) {
    auto emit = [&](const char* group, const std::optional<double>& v) {
      char buf[32];
      if (v) {
        std::snprintf(buf, sizeof buf, "%.6f", *v);
      } else {
        std::snprintf(buf, sizeof buf, "nan");
      }
      metrics += row.cell.label + "," + std::to_string(row.cell.config.tasks.back().task_id) + ",final," + group +
                 "," + buf + "\n";
    };
    emit("current", row.ap_current);
    emit("previous", row.ap_previous);
    emit("all", row.ap_all);
  }
  publish_directory(opt.out, opt.force, [&](const fs::path& dir) {
    write_text_file_atomic(dir / sweep_csv_name(grid), csv);
    write_text_file_atomic(dir / "metrics.csv", metrics);
    write_text_file_atomic(dir / "config.json", run_config_to_json(base));
  });
  out << csv;
  return kExitOk;
}

int cmd_analyze(const Options& opt, std::ostream& out) {
  const fs::path run_dir(opt.ammd_dir);
  if (!fs::is_directory(run_dir)) throw IoError("run directory " + run_dir.string() + " not found");
  const auto per_layer = ammd_per_layer(run_dir);
  const auto heatmap = prompt_similarity(run_dir);
  auto fill = [&](const fs::path& dir) {
    write_text_file_atomic(dir / "fig6_ammd.csv", ammd_csv(per_layer));
    write_text_file_atomic(dir / "fig1_heatmap.csv", heatmap_csv(heatmap));
  };
  if (!opt.out.empty()) {
    publish_directory(opt.out, opt.force, fill);
  } else {
    refuse_existing(run_dir / "fig6_ammd.csv", opt.force);
    refuse_existing(run_dir / "fig1_heatmap.csv", opt.force);
    fill(run_dir);
  }
  out << ammd_csv(per_layer);
  return kExitOk;
}

int cmd_gradcheck(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto results = run_gradient_suite(opt.overrides.seed.value_or(0), opt.points);
  std::vector<std::string> failing;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-30s max_rel_err %.3e  tol %.0e  points %zu  %s\n", r.op.c_str(),
                  r.max_relative_error, r.tolerance, r.points, r.passed ? "ok" : "FAIL");
    out << line;
    if (!r.passed) failing.push_back(r.op);
  }
  if (failing.empty()) return kExitOk;
  err << "gradient check failed for:";
  for (const auto& op : failing) err << ' ' << op;
  err << '\n';
  return kExitNumeric;
}

int cmd_pseudo_label(const Options& opt, std::ostream& out) {
  const double tau = opt.overrides.tau.value_or(TrainingConfig{}.tau_pseudo);
  json doc;
  try {
    doc = json::parse(read_text_file(opt.detections));
  } catch (const json::exception& e) {
    throw ConfigError(opt.detections + ": " + e.what());
  }
  const json* scenes = doc.is_object() && doc.contains("scenes") ? &doc["scenes"] : &doc;
  if (!scenes->is_array()) throw ConfigError(opt.detections + ": expected an array of per-scene detection lists");
  json out_scenes = json::array();
  std::size_t kept = 0, total = 0;
  for (std::size_t s = 0; s < scenes->size(); ++s) {
    const json& list = (*scenes)[s];
    if (!list.is_array()) throw ConfigError("scenes[" + std::to_string(s) + "] must be an array");
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string where = "scenes[" + std::to_string(s) + "][" + std::to_string(i) + "]";
      try {
        const auto box = list[i].at("box").get<std::array<double, 4>>();
        dets.push_back(Detection{list[i].at("score").get<double>(), list[i].at("class_id").get<int>(),
                                 Box{box[0], box[1], box[2], box[3]}});
      } catch (const json::exception&) {
        throw ConfigError(where + " needs numeric score, class_id and box[4]");
      }
    }
    total += dets.size();
    json labels = json::array();
    for (const auto& p : pseudo_label(dets, tau)) {
      labels.push_back({{"class_id", p.class_id}, {"score", p.score}, {"box", {p.box.cx, p.box.cy, p.box.w, p.box.h}}});
      ++kept;
    }
    out_scenes.push_back(std::move(labels));
  }
  const json result = {{"tau", tau}, {"scenes", out_scenes}};
  refuse_existing(opt.out, opt.force);
  write_text_file_atomic(opt.out, result.dump(2) + "\n");
  out << "kept " << kept << " of " << total << " detections with score > " << tau << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parameterized-prompt incremental detection toolkit", "prompt_evolve"};
  app.require_subcommand(1);
  Options opt;

  auto* train = app.add_subcommand("train", "Run the incremental protocol and write a run directory");
  train->add_option("--config", opt.config, "Run configuration JSON")->required();
  train->add_option("--out", opt.out, "Output run directory")->required();
  train->add_flag("--force", opt.force, "Replace an existing output directory");
  add_overrides(train, opt.overrides, true, true);

  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse prompt checkpoints");
  fuse_cmd->add_option("--prev", opt.prev, "Previous fused checkpoint")->required();
  fuse_cmd->add_option("--current", opt.current, "Current trained checkpoint")->required();
  fuse_cmd->add_option("--init", opt.init, "Initial checkpoint")->required();
  fuse_cmd->add_option("--out", opt.out, "Fused checkpoint path; the audit goes next to it")->required();
  fuse_cmd->add_flag("--force", opt.force, "Replace existing outputs");
  add_overrides(fuse_cmd, opt.overrides, true, false);

  auto* sweep = app.add_subcommand("sweep", "Run a hyperparameter grid");
  sweep->add_option("--grid", opt.grid, "table7 | table8 | dim")->required();
  sweep->add_option("--config", opt.config, "Base run configuration JSON")->required();
  sweep->add_option("--out", opt.out, "Output directory")->required();
  sweep->add_flag("--force", opt.force, "Replace an existing output directory");
  add_overrides(sweep, opt.overrides, true, true);

  auto* analyze = app.add_subcommand("analyze", "Prompt diversity and similarity diagnostics for a run");
  analyze->add_option("--ammd", opt.ammd_dir, "Run directory written by train")->required();
  analyze->add_option("--out", opt.out, "Output directory (default: the run directory)");
  analyze->add_flag("--force", opt.force, "Replace existing outputs");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--seed", opt.overrides.seed, "Random seed");
  gradcheck->add_option("--points", opt.points, "Random points per op")->check(CLI::PositiveNumber);

  auto* pseudo = app.add_subcommand("pseudo-label", "Filter detections by score threshold");
  pseudo->add_option("--detections", opt.detections, "JSON array of per-scene detection lists")->required();
  pseudo->add_option("--out", opt.out, "Output JSON path")->required();
  pseudo->add_option("--tau", opt.overrides.tau, "Score threshold (default 0.65)");
  pseudo->add_flag("--force", opt.force, "Replace an existing output file");

  try {
    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(opt, out);
    if (*fuse_cmd) return cmd_fuse(opt, out);
    if (*sweep) return cmd_sweep(opt, out);
    if (*analyze) return cmd_analyze(opt, out);
    if (*gradcheck) return cmd_gradcheck(opt, out, err);
    if (*pseudo) return cmd_pseudo_label(opt, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace prompt_evolve::cli
