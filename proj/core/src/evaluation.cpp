#include "prompt_evolve/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

double iou(const Box& a, const Box& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<PseudoLabel> pseudo_label(std::span<const Detection> dets, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("pseudo-label threshold must lie in [0, 1]");
  std::vector<PseudoLabel> out;
  for (const auto& d : dets) {
    if (d.score > tau) out.push_back(PseudoLabel{d.class_id, d.box, d.score});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

std::vector<Target> merge_labels(std::span<const Target> ground_truth, std::span<const PseudoLabel> pseudo,
                                 std::span<const int> current_classes) {
  std::vector<Target> out(ground_truth.begin(), ground_truth.end());
  std::vector<const PseudoLabel*> ordered;
  for (const auto& p : pseudo) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->score > b->score; });
  for (const PseudoLabel* p : ordered) {
    if (std::find(current_classes.begin(), current_classes.end(), p->class_id) != current_classes.end()) continue;
    const bool overlaps = std::any_of(out.begin(), out.end(), [&](const Target& t) { return iou(t.box, p->box) > 0.5; });
    if (overlaps) continue;
    out.push_back(Target{p->class_id, p->box});
  }
  return out;
}

std::vector<Detection> suppress_duplicates(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool dup = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!dup) kept.push_back(d);
  }
  return kept;
}

double average_precision(const std::vector<bool>& hits, std::size_t num_ground_truth) {
  if (num_ground_truth == 0) throw ConfigError("average precision undefined without ground truth");
  const std::size_t n = hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += hits[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_ground_truth);
  }
  // Precision envelope: best precision at any recall >= r.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

ApReport compute_ap50(const std::vector<std::vector<Detection>>& detections,
                      const std::vector<std::vector<Target>>& ground_truth, std::span<const int> class_set) {
  if (detections.size() != ground_truth.size()) {
    throw DimensionError("compute_ap50: " + std::to_string(detections.size()) + " detection lists for " +
                         std::to_string(ground_truth.size()) + " scenes");
  }
  ApReport report;
  double total = 0.0;
  std::size_t counted = 0;
  for (int cls : class_set) {
    struct Scored {
      double score;
      std::size_t scene;
      const Box* box;
    };
    std::vector<Scored> scored;
    std::size_t num_gt = 0;
    for (std::size_t s = 0; s < detections.size(); ++s) {
      for (const auto& d : detections[s])
        if (d.class_id == cls) scored.push_back({d.score, s, &d.box});
      for (const auto& t : ground_truth[s]) num_gt += t.class_id == cls ? 1 : 0;
    }
    if (num_gt == 0) {
      report.per_class[cls] = std::nullopt;
      continue;
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> used(ground_truth.size());
    for (std::size_t s = 0; s < ground_truth.size(); ++s) used[s].assign(ground_truth[s].size(), false);
    std::vector<bool> hits;
    hits.reserve(scored.size());
    for (const auto& d : scored) {
      const auto& gts = ground_truth[d.scene];
      double best = -1.0;
      std::size_t best_idx = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[d.scene][g]) continue;
        const double o = iou(*d.box, gts[g].box);
        if (o > best) {
          best = o;
          best_idx = g;
        }
      }
      const bool hit = best >= kMatchIou;
      if (hit) used[d.scene][best_idx] = true;
      hits.push_back(hit);
    }
    const double ap = average_precision(hits, num_gt);
    report.per_class[cls] = ap;
    total += ap;
    ++counted;
  }
  if (counted) report.mean = total / static_cast<double>(counted);
  return report;
}

std::optional<double> mean_ap(const ApReport& report, std::span<const int> classes) {
  double total = 0.0;
  std::size_t counted = 0;
  for (int c : classes) {
    const auto it = report.per_class.find(c);
    if (it == report.per_class.end() || !it->second) continue;
    total += *it->second;
    ++counted;
  }
  if (!counted) return std::nullopt;
  return total / static_cast<double>(counted);
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine similarity of vectors with different dimension");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<std::vector<double>> similarity_heatmap(const std::vector<FeatureSet>& object_features,
                                                    const std::vector<FeatureSet>& prompt_sets) {
  std::vector<std::vector<double>> out(object_features.size(), std::vector<double>(prompt_sets.size(), 0.0));
  for (std::size_t i = 0; i < object_features.size(); ++i) {
    for (std::size_t j = 0; j < prompt_sets.size(); ++j) {
      double total = 0.0;
      std::size_t n = 0;
      for (const auto& f : object_features[i]) {
        for (const auto& p : prompt_sets[j]) {
          total += cosine(f, p);
          ++n;
        }
      }
      out[i][j] = n ? total / static_cast<double>(n) : 0.0;
    }
  }
  return out;
}

std::string heatmap_csv(const std::vector<std::vector<double>>& heatmap) {
  std::ostringstream os;
  os.precision(17);
  os << "object_task,prompt_task,similarity\n";
  for (std::size_t i = 0; i < heatmap.size(); ++i)
    for (std::size_t j = 0; j < heatmap[i].size(); ++j) os << i + 1 << ',' << j + 1 << ',' << heatmap[i][j] << '\n';
  return os.str();
}

}  // namespace prompt_evolve
