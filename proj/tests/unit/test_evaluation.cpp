#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "prompt_evolve/config.hpp"
#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/evaluation.hpp"

using namespace prompt_evolve;

namespace {

std::vector<Detection> scored(std::vector<double> scores) {
  std::vector<Detection> out;
  for (double s : scores) out.push_back(Detection{s, 0, Box{}});
  return out;
}

bool subset(const std::vector<PseudoLabel>& small, const std::vector<PseudoLabel>& big) {
  return std::all_of(small.begin(), small.end(), [&](const PseudoLabel& p) {
    return std::any_of(big.begin(), big.end(),
                       [&](const PseudoLabel& q) { return q.score == p.score && q.box == p.box; });
  });
}

}  // namespace

TEST(Iou, HandValues) {
  const Box a{0.5, 0.5, 0.2, 0.2};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_NEAR(iou(a, Box{0.6, 0.5, 0.2, 0.2}), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(iou(a, Box{0.9, 0.9, 0.1, 0.1}), 0.0);
}

TEST(PseudoLabel, StrictThreshold) {
  const auto kept = pseudo_label(scored({0.65, 0.650001, 0.9, 0.2}), 0.65);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].score, 0.650001);
  EXPECT_TRUE(pseudo_label(scored({1.0}), 1.0).empty());
  EXPECT_EQ(pseudo_label(scored({0.0, 1e-12}), 0.0).size(), 1u);
}

TEST(PseudoLabel, DefaultThreshold) { EXPECT_DOUBLE_EQ(TrainingConfig{}.tau_pseudo, 0.65); }

TEST(PseudoLabel, MonotoneInTau) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Detection> dets;
  for (int i = 0; i < 200; ++i) dets.push_back(Detection{u(gen), i % 3, Box{u(gen), u(gen), 0.1, 0.1}});
  dets.push_back(Detection{0.65, 0, Box{}});
  const std::vector<double> grid = {0, 0.25, 0.5, 0.65, 0.9, 1.0};
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    EXPECT_TRUE(subset(pseudo_label(dets, grid[i + 1]), pseudo_label(dets, grid[i])));
}

TEST(MergeLabels, FiltersCurrentClassesAndOverlaps) {
  const std::vector<Target> gt = {{3, Box{0.3, 0.3, 0.2, 0.2}}};
  const std::vector<PseudoLabel> pseudo = {
      {0, Box{0.3, 0.3, 0.2, 0.2}, 0.9},   // duplicates ground truth
      {1, Box{0.7, 0.7, 0.2, 0.2}, 0.8},   // kept
      {1, Box{0.71, 0.7, 0.2, 0.2}, 0.7},  // duplicates a kept pseudo label
      {3, Box{0.2, 0.8, 0.1, 0.1}, 0.95},  // current-task class
      {2, Box{0.8, 0.2, 0.1, 0.1}, 0.7},   // kept
  };
  const std::vector<int> current = {3, 4, 5};
  const auto merged = merge_labels(gt, pseudo, current);
  ASSERT_EQ(merged.size(), 3u);
  EXPECT_EQ(merged[0].class_id, 3);
  EXPECT_EQ(merged[1].class_id, 1);
  EXPECT_EQ(merged[2].class_id, 2);
}

TEST(SuppressDuplicates, KeepsBestPerClass) {
  std::vector<Detection> dets = {{0.5, 0, Box{0.5, 0.5, 0.2, 0.2}},
                                 {0.9, 0, Box{0.51, 0.5, 0.2, 0.2}},
                                 {0.4, 1, Box{0.5, 0.5, 0.2, 0.2}}};
  const auto kept = suppress_duplicates(dets);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].class_id, 1);
}

TEST(AveragePrecision, HandWalkedCurve) {
  // TP, FP, TP over two ground-truth boxes: 0.5 * 1 + 0.5 * 2/3.
  EXPECT_NEAR(average_precision({true, false, true}, 2), 5.0 / 6.0, 1e-9);
  EXPECT_NEAR(oracle::average_precision({true, false, true}, 2), 5.0 / 6.0, 1e-9);
  EXPECT_THROW(average_precision({true}, 0), ConfigError);
}

TEST(AveragePrecision, MatchesIndependentCurve) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + gen() % 12;
    std::vector<bool> hits(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) tp += (hits[i] = gen() % 2);
    const std::size_t gt = tp + gen() % 3;
    if (gt == 0) continue;
    EXPECT_NEAR(average_precision(hits, gt), oracle::average_precision(hits, gt), 1e-12);
  }
}

TEST(ComputeAp50, HandExampleThroughMatching) {
  const Box g1{0.3, 0.3, 0.2, 0.2}, g2{0.7, 0.7, 0.2, 0.2};
  const std::vector<std::vector<Target>> gt = {{{0, g1}, {0, g2}}};
  const std::vector<std::vector<Detection>> dets = {
      {{0.9, 0, g1}, {0.8, 0, Box{0.5, 0.1, 0.1, 0.1}}, {0.7, 0, g2}}};
  const std::vector<int> classes = {0};
  const auto report = compute_ap50(dets, gt, classes);
  EXPECT_NEAR(*report.mean, 5.0 / 6.0, 1e-9);
}

TEST(ComputeAp50, PerfectDetectorScoresOne) {
  std::vector<std::vector<Target>> gt;
  std::vector<std::vector<Detection>> dets;
  for (int s = 0; s < 5; ++s) {
    gt.push_back({{s % 2, Box{0.2 + 0.1 * s, 0.5, 0.1, 0.1}}, {2, Box{0.5, 0.8, 0.2, 0.1}}});
    dets.push_back({});
    for (const Target& t : gt.back()) dets.back().push_back(Detection{0.9, t.class_id, t.box});
  }
  const std::vector<int> classes = {0, 1, 2};
  const auto report = compute_ap50(dets, gt, classes);
  EXPECT_DOUBLE_EQ(*report.mean, 1.0);
}

TEST(ComputeAp50, DuplicateDetectionIsFalsePositive) {
  const Box g{0.5, 0.5, 0.2, 0.2};
  const std::vector<std::vector<Target>> gt = {{{0, g}}};
  const std::vector<std::vector<Detection>> dets = {{{0.9, 0, g}, {0.95, 0, g}}};
  const std::vector<int> classes = {0};
  EXPECT_DOUBLE_EQ(*compute_ap50(dets, gt, classes).mean, 1.0);
}

TEST(ComputeAp50, ClassWithoutGroundTruthIsSkipped) {
  const std::vector<std::vector<Target>> gt = {{{0, Box{}}}};
  const std::vector<std::vector<Detection>> dets = {{{0.9, 0, Box{}}}};
  const std::vector<int> classes = {0, 7};
  const auto report = compute_ap50(dets, gt, classes);
  EXPECT_FALSE(report.per_class.at(7).has_value());
  EXPECT_DOUBLE_EQ(*report.mean, 1.0);
}

TEST(AveragePrecision, MonotonicityProperties) {
  std::mt19937_64 gen(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + gen() % 10;
    std::vector<bool> hits(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) tp += (hits[i] = gen() % 2);
    const std::size_t gt = tp + 1 + gen() % 2;
    const double base = average_precision(hits, gt);
    // An extra true positive inserted anywhere never lowers AP.
    std::vector<bool> more = hits;
    more.insert(more.begin() + static_cast<long>(gen() % (n + 1)), true);
    EXPECT_GE(average_precision(more, gt) + 1e-12, base);
    // A false positive that outranks everything never raises AP.
    std::vector<bool> worse = hits;
    worse.insert(worse.begin(), false);
    EXPECT_LE(average_precision(worse, gt), base + 1e-12);
  }
}

TEST(Heatmap, CosineMeans) {
  const std::vector<FeatureSet> objects = {{{1, 0}}, {{0, 1}, {0, 2}}};
  const std::vector<FeatureSet> prompts = {{{1, 0}}, {{1, 1}}, {{0, 0}}};
  const auto h = similarity_heatmap(objects, prompts);
  ASSERT_EQ(h.size(), 2u);
  ASSERT_EQ(h[0].size(), 3u);
  EXPECT_DOUBLE_EQ(h[0][0], 1.0);
  EXPECT_NEAR(h[0][1], 1 / std::sqrt(2.0), 1e-12);
  EXPECT_EQ(h[0][2], 0.0);
  EXPECT_DOUBLE_EQ(h[1][0], 0.0);
  const std::string csv = heatmap_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "object_task,prompt_task,similarity");
}
