#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prompt_evolve {

// Center/size box in unit-square coordinates.
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 0.1;
  double h = 0.1;

  bool valid() const { return w > 0.0 && h > 0.0; }
  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

struct Detection {
  double score = 0.0;  // probability of the highest-scoring object class
  int class_id = -1;
  Box box;
};

struct PseudoLabel {
  int class_id = -1;
  Box box;
  double score = 0.0;
};

struct Target {
  int class_id = -1;
  Box box;
};

// Keeps detections with score strictly above tau, highest score first.
std::vector<PseudoLabel> pseudo_label(std::span<const Detection> dets, double tau);

// Ground truth plus the pseudo labels that (a) carry a class outside
// `current_classes`, (b) overlap no ground-truth box with IoU > 0.5 and
// (c) overlap no higher-scoring kept pseudo label with IoU > 0.5.
std::vector<Target> merge_labels(std::span<const Target> ground_truth, std::span<const PseudoLabel> pseudo,
                                 std::span<const int> current_classes);

// Per-class IoU duplicate suppression, highest score kept.
std::vector<Detection> suppress_duplicates(std::vector<Detection> dets, double iou_threshold = 0.5);

// All-points interpolated area under the precision/recall curve. `hits` lists
// the true-positive flag of every detection in descending score order.
double average_precision(const std::vector<bool>& hits, std::size_t num_ground_truth);

struct ApReport {
  std::map<int, std::optional<double>> per_class;  // nullopt: no ground truth
  std::optional<double> mean;                      // over classes with ground truth
};

inline constexpr double kMatchIou = 0.5;

// Per-class AP at IoU >= 0.5: detections sorted by score descending, each
// matched greedily to the best-overlapping unmatched ground truth of its scene.
ApReport compute_ap50(const std::vector<std::vector<Detection>>& detections,
                      const std::vector<std::vector<Target>>& ground_truth, std::span<const int> class_set);

// Mean AP over a subset of an existing report.
std::optional<double> mean_ap(const ApReport& report, std::span<const int> classes);

// rows[i][j]: mean cosine similarity between task-i object features and
// task-j prompt vectors. Zero-norm vectors contribute similarity 0.
using FeatureSet = std::vector<std::vector<double>>;
std::vector<std::vector<double>> similarity_heatmap(const std::vector<FeatureSet>& object_features,
                                                    const std::vector<FeatureSet>& prompt_sets);
std::string heatmap_csv(const std::vector<std::vector<double>>& heatmap);

}  // namespace prompt_evolve
