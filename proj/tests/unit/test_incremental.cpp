#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "prompt_evolve/config.hpp"
#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/incremental.hpp"

using namespace prompt_evolve;

namespace {

RunConfig small_config(std::size_t tasks) {
  RunConfig cfg = default_run_config();
  cfg.tasks.resize(tasks);
  for (auto& t : cfg.tasks) t.scene_count = 30;
  cfg.scenes.eval_scenes_per_task = 15;
  cfg.training.epochs_per_task = 4;
  cfg.training.lr_drop_epoch = 3;
  cfg.seed = 17;
  return cfg;
}

std::string error_of(const std::string& json) {
  try {
    parse_run_config(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(DetectionLoss, PerfectPredictionIsZero) {
  Tape tape;
  // Two slots, two classes plus no-object; slot 0 is class 1, slot 1 is empty.
  const Var logits = tape.constant(Tensor::matrix({{-60, 60, -60}, {-60, -60, 60}}));
  const Var boxes = tape.constant(Tensor::matrix({{0.5, 0.5, 0.2, 0.2}, {0.1, 0.1, 0.1, 0.1}}));
  const std::vector<Target> targets = {{1, Box{0.5, 0.5, 0.2, 0.2}}};
  const std::vector<int> assignment = {0, -1};
  EXPECT_LT(detection_loss(logits, boxes, assignment, targets, 2, LossOptions{}).value().item(), 1e-12);
}

TEST(DetectionLoss, GammaZeroAlphaOneIsCrossEntropy) {
  const Tensor l = Tensor::matrix({{0.3, -1.2, 0.4}, {1.1, 0.2, -0.5}, {0.0, 0.7, 0.1}});
  const std::vector<Target> targets = {{0, Box{0.5, 0.5, 0.2, 0.2}}};
  const std::vector<int> assignment = {-1, 0, -1};
  const std::vector<std::size_t> truth = {2, 0, 2};
  double ce = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(l.at(r, c));
    ce -= std::log(std::exp(l.at(r, truth[r])) / z);
  }
  ce /= 3.0;
  Tape tape;
  const Var boxes = tape.constant(Tensor::matrix({{0, 0, 0, 0}, {0.5, 0.5, 0.2, 0.2}, {0, 0, 0, 0}}));
  LossOptions opts;
  opts.focal_alpha = 1.0;
  opts.focal_gamma = 0.0;
  opts.log_floor = 0.0;
  EXPECT_NEAR(detection_loss(tape.constant(l), boxes, assignment, targets, 2, opts).value().item(), ce, 1e-12);
}

TEST(DetectionLoss, BoxTermIsMeanAbsoluteErrorOverMatches) {
  Tape tape;
  const Var logits = tape.constant(Tensor::matrix({{-60, 60, -60}, {-60, -60, 60}}));
  const Var boxes = tape.constant(Tensor::matrix({{0.6, 0.5, 0.2, 0.1}, {0.9, 0.9, 0.9, 0.9}}));
  const std::vector<Target> targets = {{1, Box{0.5, 0.5, 0.2, 0.2}}};
  LossOptions opts;
  opts.box_weight = 2.0;
  const double loss = detection_loss(logits, boxes, std::vector<int>{0, -1}, targets, 2, opts).value().item();
  EXPECT_NEAR(loss, 2.0 * (0.1 + 0.1) / 4.0, 1e-12);
}

TEST(TrainTask, ZeroEpochsLeavesParametersUnchanged) {
  RunConfig cfg = small_config(1);
  cfg.training.epochs_per_task = 0;
  cfg.training.lr_drop_epoch = 0;
  ToyDetector model = build_detector(cfg);
  const auto prompts = model.prompt_parameters();
  const auto heads = model.head_parameters();
  const auto seq = build_task_sequence(cfg);
  const auto examples = build_training_set(model, seq.train[0], cfg.tasks[0].class_ids, nullptr, 0.65);
  const auto stats = train_task(model, examples, cfg.training, 1e-5, 1);
  EXPECT_EQ(stats.steps, 0u);
  EXPECT_EQ(model.prompt_parameters(), prompts);
  EXPECT_EQ(model.head_parameters(), heads);
}

TEST(TrainTask, StrongSparsePenaltyShrinksPromptsMonotonically) {
  RunConfig cfg = small_config(1);
  cfg.training.optimizer.kind = OptimizerKind::GradientDescent;
  cfg.training.optimizer.weight_decay = 0.0;
  cfg.training.learning_rate_main = 1e-3;
  cfg.training.epochs_per_task = 6;
  cfg.training.lr_drop_epoch = 6;
  ToyDetector model = build_detector(cfg);
  const auto seq = build_task_sequence(cfg);
  const auto examples = build_training_set(model, seq.train[0], cfg.tasks[0].class_ids, nullptr, 0.65);
  const auto stats = train_task(model, examples, cfg.training, 1.0, 1);
  ASSERT_EQ(stats.prompt_l1.size(), 6u);
  for (std::size_t e = 1; e < stats.prompt_l1.size(); ++e) EXPECT_LT(stats.prompt_l1[e], stats.prompt_l1[e - 1]);
}

TEST(TrainTask, LossDecreasesOnFirstTask) {
  RunConfig cfg = small_config(1);
  cfg.training.epochs_per_task = 10;
  cfg.training.lr_drop_epoch = 10;
  ToyDetector model = build_detector(cfg);
  const auto seq = build_task_sequence(cfg);
  const auto examples = build_training_set(model, seq.train[0], cfg.tasks[0].class_ids, nullptr, 0.65);
  const auto stats = train_task(model, examples, cfg.training, cfg.training.lambda_sparse, 1);
  EXPECT_LT(stats.epoch_loss.back(), stats.epoch_loss.front());
}

TEST(RunIncremental, SingleTaskHasNoFusion) {
  const RunResult r = run_incremental(small_config(1));
  ASSERT_EQ(r.tasks.size(), 1u);
  EXPECT_FALSE(r.tasks[0].fused.has_value());
  EXPECT_EQ(r.tasks[0].evaluated, Stage::Trained);
  for (const auto& row : r.metrics) {
    EXPECT_EQ(row.task, 1);
    EXPECT_NE(row.class_group, "previous");
  }
  EXPECT_FALSE(r.final_ap("previous").has_value());
}

TEST(RunIncremental, FusesFromSecondTaskAndKeepsBackboneFrozen) {
  const RunResult r = run_incremental(small_config(3));
  ASSERT_EQ(r.tasks.size(), 3u);
  EXPECT_FALSE(r.tasks[0].fused.has_value());
  for (std::size_t t = 1; t < 3; ++t) {
    ASSERT_TRUE(r.tasks[t].fused.has_value());
    EXPECT_EQ(r.tasks[t].evaluated, Stage::Fused);
    EXPECT_EQ(r.tasks[t].audit->total(), r.init.params.total_len());
  }
  for (const auto& task : r.tasks) EXPECT_EQ(task.frozen_hash_before, task.frozen_hash_after);
  EXPECT_EQ(r.tasks.front().frozen_hash_before, r.tasks.back().frozen_hash_after);
  EXPECT_EQ(&r.final_prompts(), &*r.tasks.back().fused);
}

TEST(RunIncremental, FusionOffEvaluatesTrainedPrompts) {
  RunConfig cfg = small_config(2);
  cfg.ablation.fusion = false;
  const RunResult r = run_incremental(cfg);
  EXPECT_FALSE(r.tasks[1].fused.has_value());
  EXPECT_EQ(r.tasks[1].evaluated, Stage::Trained);
}

TEST(RunIncremental, PromptsOffHasNoPromptParameters) {
  RunConfig cfg = small_config(2);
  cfg.ablation.prompts = false;
  const RunResult r = run_incremental(cfg);
  EXPECT_TRUE(r.final_prompts().params.empty());
  EXPECT_FALSE(r.tasks[1].fused.has_value());
}

TEST(RunIncremental, DeterministicMetrics) {
  const RunConfig cfg = small_config(2);
  EXPECT_EQ(metrics_csv(run_incremental(cfg).metrics), metrics_csv(run_incremental(cfg).metrics));
}

TEST(RunIncremental, RunDirectoryRestoresEvaluatedModel) {
  const RunConfig cfg = small_config(2);
  const RunResult r = run_incremental(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "pe_run_dir_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_run_directory(dir, r);
  for (const char* f : {"config.json", "metrics.csv", "summary.json", "checkpoints/init.json",
                        "checkpoints/task1_trained.json", "checkpoints/task2_fused.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const ToyDetector model = load_detector_for_task(dir, cfg, 2);
  EXPECT_EQ(model.prompt_parameters(), r.tasks[1].fused->params);
  EXPECT_EQ(model.head_parameters(), r.tasks[1].heads.params);
  std::filesystem::remove_all(dir);
}

TEST(MetricsCsv, HeaderAndMissingValues) {
  const std::vector<MetricRow> rows = {{1, Stage::Trained, "current", 0.5}, {2, Stage::Fused, "previous", std::nullopt}};
  EXPECT_EQ(metrics_csv(rows), "task,stage,class_group,ap50\n1,trained,current,0.500000\n2,fused,previous,nan\n");
}

TEST(RunConfigParse, RoundTripsThroughJson) {
  RunConfig cfg = default_run_config();
  cfg.seed = 99;
  cfg.training.fusion = FusionConfig{0.3, 0.7};
  cfg.ablation.sparse_loss = false;
  const RunConfig back = parse_run_config(run_config_to_json(cfg));
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(cfg));
}

TEST(RunConfigParse, EmptyObjectGivesDefaults) {
  EXPECT_EQ(run_config_to_json(parse_run_config("{}")), run_config_to_json(default_run_config()));
}

TEST(RunConfigParse, ErrorsNameTheField) {
  EXPECT_NE(error_of(R"({"training":{"learnin_rate_main":1}})").find("learnin_rate_main"), std::string::npos);
  EXPECT_NE(error_of(R"({"training":{"epochs_per_task":"ten"}})").find("epochs_per_task"), std::string::npos);
  EXPECT_NE(error_of(R"({"detector":{"heads":-1}})").find("heads"), std::string::npos);
  EXPECT_NE(error_of(R"({"training":{"fusion":{"top_k":2}}})").find("top_k"), std::string::npos);
  EXPECT_NE(error_of(R"({"tasks":[{"class_ids":[0,1]},{"class_ids":[1]}]})"), "");
  EXPECT_NE(error_of("{ nope"), "");
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), IoError);
}
