#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "prompt_evolve/checkpoint.hpp"
#include "prompt_evolve/random.hpp"

namespace fs = std::filesystem;
using namespace prompt_evolve;

namespace {

const char* kSmallConfig = R"({
  "seed": 3,
  "tasks": [
    {"task_id": 1, "class_ids": [0, 1, 2], "scene_count": 24},
    {"task_id": 2, "class_ids": [3, 4, 5], "scene_count": 24}
  ],
  "scenes": {"eval_scenes_per_task": 10},
  "training": {"epochs_per_task": 3, "lr_drop_epoch": 2}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pe_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    args.insert(args.begin(), "prompt_evolve");
    return cli::run(args, out_, err_);
  }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

ParameterVector random_params(Rng& rng) {
  ParameterVector pv;
  pv.add("layer0.W1", random_normal({4, 3}, 1.0, rng));
  pv.add("layer0.W2", random_normal({3, 5}, 1.0, rng));
  return pv;
}

}  // namespace

TEST_F(Cli, MissingConfigIsIoErrorNamingPath) {
  const std::string missing = (dir_ / "nope.json").string();
  EXPECT_EQ(run({"train", "--config", missing, "--out", (dir_ / "run").string()}), cli::kExitIo);
  EXPECT_NE(err_.str().find(missing), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(dir_ / "run"));
}

TEST_F(Cli, MalformedConfigIsConfigError) {
  const auto cfg = write("bad.json", R"({"training": {"epochs_per_task": "many"}})");
  EXPECT_EQ(run({"train", "--config", cfg.string(), "--out", (dir_ / "run").string()}), cli::kExitConfig);
  EXPECT_NE(err_.str().find("epochs_per_task"), std::string::npos) << err_.str();
}

TEST_F(Cli, UnknownSubcommandAndMissingFlagAreUsageErrors) {
  EXPECT_EQ(run({"frobnicate"}), cli::kExitConfig);
  EXPECT_EQ(run({"train", "--config", "x.json"}), cli::kExitConfig);
  EXPECT_EQ(run({"--help"}), cli::kExitOk);
}

TEST_F(Cli, TrainWritesRunDirectoryAndRefusesOverwrite) {
  const auto cfg = write("cfg.json", kSmallConfig);
  const auto out = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", out.string()}), cli::kExitOk) << err_.str();
  EXPECT_TRUE(fs::exists(out / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "task2_fused.json"));
  const std::string metrics = slurp(out / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "task,stage,class_group,ap50");

  EXPECT_EQ(run({"train", "--config", cfg.string(), "--out", out.string()}), cli::kExitIo);
  EXPECT_EQ(slurp(out / "metrics.csv"), metrics);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", out.string(), "--force"}), cli::kExitOk);
  EXPECT_EQ(slurp(out / "metrics.csv"), metrics);
  for (const auto& entry : fs::directory_iterator(dir_))
    EXPECT_EQ(entry.path().filename().string().find(".run."), std::string::npos) << entry.path();

  ASSERT_EQ(run({"analyze", "--ammd", out.string()}), cli::kExitOk) << err_.str();
  const std::string ammd = slurp(out / "fig6_ammd.csv");
  EXPECT_EQ(std::count(ammd.begin(), ammd.end(), '\n'), 4);  // header + 3 decoder layers
  EXPECT_TRUE(fs::exists(out / "fig1_heatmap.csv"));
  EXPECT_EQ(run({"analyze", "--ammd", out.string()}), cli::kExitIo);
}

TEST_F(Cli, FuseIdentityAndAudit) {
  Rng rng(1);
  const ParameterVector theta = random_params(rng), init = random_params(rng);
  write_checkpoint(dir_ / "theta.json", Checkpoint{1, Stage::Trained, theta});
  write_checkpoint(dir_ / "init.json", Checkpoint{0, Stage::Init, init});
  const auto out = dir_ / "fused.json";
  ASSERT_EQ(run({"fuse", "--prev", (dir_ / "theta.json").string(), "--current", (dir_ / "theta.json").string(),
                 "--init", (dir_ / "init.json").string(), "--out", out.string()}),
            cli::kExitOk)
      << err_.str();
  const Checkpoint fused = read_checkpoint(out);
  EXPECT_EQ(fused.stage, Stage::Fused);
  EXPECT_EQ(fused.params, theta);
  const auto audit = nlohmann::json::parse(slurp(dir_ / "fused_audit.json"));
  EXPECT_EQ(audit["preserved_prev"].get<std::size_t>() + audit["preserved_curr"].get<std::size_t>() +
                audit["averaged"].get<std::size_t>() + audit["fallback"].get<std::size_t>(),
            theta.total_len());
  EXPECT_EQ(run({"fuse", "--prev", (dir_ / "theta.json").string(), "--current", (dir_ / "theta.json").string(),
                 "--init", (dir_ / "init.json").string(), "--out", out.string()}),
            cli::kExitIo);
}

TEST_F(Cli, FuseTopKOneReturnsPrevious) {
  Rng rng(2);
  const ParameterVector prev = random_params(rng), curr = random_params(rng), init = random_params(rng);
  write_checkpoint(dir_ / "prev.json", Checkpoint{1, Stage::Trained, prev});
  write_checkpoint(dir_ / "curr.json", Checkpoint{2, Stage::Trained, curr});
  write_checkpoint(dir_ / "init.json", Checkpoint{0, Stage::Init, init});
  ASSERT_EQ(run({"fuse", "--prev", (dir_ / "prev.json").string(), "--current", (dir_ / "curr.json").string(), "--init",
                 (dir_ / "init.json").string(), "--out", (dir_ / "f.json").string(), "--top-k", "1.0"}),
            cli::kExitOk);
  const Checkpoint fused = read_checkpoint(dir_ / "f.json");
  EXPECT_EQ(fused.params, prev);
  EXPECT_EQ(fused.task_id, 2);
}

TEST_F(Cli, FuseMisalignedIsConfigError) {
  Rng rng(3);
  ParameterVector other;
  other.add("layer0.W1", random_normal({2, 2}, 1.0, rng));
  write_checkpoint(dir_ / "a.json", Checkpoint{1, Stage::Trained, random_params(rng)});
  write_checkpoint(dir_ / "b.json", Checkpoint{2, Stage::Trained, other});
  EXPECT_EQ(run({"fuse", "--prev", (dir_ / "a.json").string(), "--current", (dir_ / "b.json").string(), "--init",
                 (dir_ / "a.json").string(), "--out", (dir_ / "f.json").string()}),
            cli::kExitConfig);
  EXPECT_FALSE(fs::exists(dir_ / "f.json"));
}

TEST_F(Cli, PseudoLabelFiltersStrictly) {
  const auto dets = write("dets.json", R"([
    [{"score": 0.65, "class_id": 0, "box": [0.5, 0.5, 0.1, 0.1]},
     {"score": 0.7, "class_id": 1, "box": [0.2, 0.2, 0.1, 0.1]}],
    []
  ])");
  const auto out = dir_ / "labels.json";
  ASSERT_EQ(run({"pseudo-label", "--detections", dets.string(), "--out", out.string()}), cli::kExitOk) << err_.str();
  const auto doc = nlohmann::json::parse(slurp(out));
  EXPECT_DOUBLE_EQ(doc["tau"].get<double>(), 0.65);
  ASSERT_EQ(doc["scenes"].size(), 2u);
  ASSERT_EQ(doc["scenes"][0].size(), 1u);
  EXPECT_EQ(doc["scenes"][0][0]["class_id"], 1);
  EXPECT_TRUE(doc["scenes"][1].empty());

  const auto bad = write("bad.json", R"([[{"score": "high"}]])");
  EXPECT_EQ(run({"pseudo-label", "--detections", bad.string(), "--out", (dir_ / "x.json").string()}),
            cli::kExitConfig);
}

TEST_F(Cli, GradcheckPasses) {
  EXPECT_EQ(run({"gradcheck", "--points", "3"}), cli::kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("prompted_attention"), std::string::npos);
  EXPECT_EQ(out_.str().find("FAIL"), std::string::npos);
}
