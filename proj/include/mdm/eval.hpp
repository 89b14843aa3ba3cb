#ifndef MDM_EVAL_HPP
#define MDM_EVAL_HPP

// Pseudo-label quality: mask IoU, greedy instance matching with
// IoU>50/70/90 counts and an overall IoU, and all-point-interpolated AP.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mdm/codec.hpp"
#include "mdm/grid.hpp"

namespace mdm {

inline double mask_iou(const Mask& a, const Mask& b) {
  require_same_shape(a.shape(), b.shape(), "IoU masks");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) throw Error("IoU undefined: both masks empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pairwise IoU between every predicted and every gt instance, built from a
/// joint histogram of the two label grids.
struct IouTable {
  std::vector<std::uint32_t> pred_ids;  ///< ascending
  std::vector<std::uint32_t> gt_ids;    ///< ascending
  std::vector<std::size_t> pred_area;
  std::vector<std::size_t> gt_area;
  std::vector<double> iou;  ///< pred-major

  double operator()(std::size_t p, std::size_t g) const { return iou[p * gt_ids.size() + g]; }
};

inline IouTable iou_table(const LabelGrid& pred, const LabelGrid& gt) {
  require_same_shape(pred.shape(), gt.shape(), "prediction vs ground truth");
  std::map<std::uint32_t, std::size_t> parea, garea;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> inter;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i]) ++parea[pred[i]];
    if (gt[i]) ++garea[gt[i]];
    if (pred[i] && gt[i]) ++inter[{pred[i], gt[i]}];
  }
  IouTable t;
  for (auto [id, a] : parea) {
    t.pred_ids.push_back(id);
    t.pred_area.push_back(a);
  }
  for (auto [id, a] : garea) {
    t.gt_ids.push_back(id);
    t.gt_area.push_back(a);
  }
  t.iou.assign(t.pred_ids.size() * t.gt_ids.size(), 0.0);
  for (const auto& [key, n] : inter) {
    const auto p = static_cast<std::size_t>(
        std::lower_bound(t.pred_ids.begin(), t.pred_ids.end(), key.first) - t.pred_ids.begin());
    const auto g = static_cast<std::size_t>(
        std::lower_bound(t.gt_ids.begin(), t.gt_ids.end(), key.second) - t.gt_ids.begin());
    t.iou[p * t.gt_ids.size() + g] =
        static_cast<double>(n) / static_cast<double>(t.pred_area[p] + t.gt_area[g] - n);
  }
  return t;
}

struct GtMatch {
  std::uint32_t gt_id = 0;
  double iou = 0.0;  ///< IoU with the matched prediction, 0 when unmatched
  std::optional<std::uint32_t> matched_pred;
};

struct MatchCounts {
  std::size_t iou50 = 0;
  std::size_t iou70 = 0;
  std::size_t iou90 = 0;
};

struct MatchReport {
  std::vector<GtMatch> per_gt;
  std::vector<std::uint32_t> unmatched_preds;
  MatchCounts counts;
  /// 100 x sum of matched IoU / (gt instances + unmatched predictions).
  double overall_iou = 0.0;
};

struct MatchOptions {
  bool class_aware = false;
  /// Unmatched predictions enter the overall IoU mean as zeros.
  bool count_unmatched_predictions = true;
};

inline std::uint32_t class_of(const ClassTable& table, std::uint32_t id) {
  const auto it = table.find(id);
  return it == table.end() ? 0 : it->second;
}

/// Predictions visit in descending area (id ascending on ties); each claims
/// the unmatched gt with highest positive IoU, lowest gt id on ties.
inline MatchReport greedy_match(const LabelGrid& pred, const ClassTable& pred_classes,
                                const LabelGrid& gt, const ClassTable& gt_classes,
                                const MatchOptions& opts = {}) {
  const IouTable t = iou_table(pred, gt);
  std::vector<std::size_t> order(t.pred_ids.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&t](std::size_t a, std::size_t b) {
    return t.pred_area[a] > t.pred_area[b];
  });

  MatchReport r;
  r.per_gt.resize(t.gt_ids.size());
  for (std::size_t g = 0; g < t.gt_ids.size(); ++g) r.per_gt[g].gt_id = t.gt_ids[g];
  std::vector<bool> taken(t.gt_ids.size(), false);
  for (auto p : order) {
    const auto pc = class_of(pred_classes, t.pred_ids[p]);
    std::optional<std::size_t> best;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < t.gt_ids.size(); ++g) {
      if (taken[g]) continue;
      if (opts.class_aware && class_of(gt_classes, t.gt_ids[g]) != pc) continue;
      if (t(p, g) > best_iou) {
        best_iou = t(p, g);
        best = g;
      }
    }
    if (!best) {
      r.unmatched_preds.push_back(t.pred_ids[p]);
      continue;
    }
    taken[*best] = true;
    r.per_gt[*best].iou = best_iou;
    r.per_gt[*best].matched_pred = t.pred_ids[p];
  }
  std::sort(r.unmatched_preds.begin(), r.unmatched_preds.end());

  double sum = 0.0;
  for (const auto& m : r.per_gt) {
    sum += m.iou;
    r.counts.iou50 += m.iou > 0.5;
    r.counts.iou70 += m.iou > 0.7;
    r.counts.iou90 += m.iou > 0.9;
  }
  const std::size_t denom =
      r.per_gt.size() + (opts.count_unmatched_predictions ? r.unmatched_preds.size() : 0);
  r.overall_iou = denom == 0 ? 100.0 : 100.0 * sum / static_cast<double>(denom);
  return r;
}

// ------------------------------------------------------------ AP

/// Instance id -> confidence.
using ScoreTable = std::map<std::uint32_t, double>;

/// Confidence proxy for label maps without scores: instance area.
inline ScoreTable area_scores(const LabelGrid& grid) {
  ScoreTable s;
  for (auto v : grid)
    if (v) s[v] += 1.0;
  return s;
}

struct ApResult {
  double mean_ap = 0.0;
  std::map<std::uint32_t, double> per_class;
  /// Classes that have predictions but no gt instance (scored 0).
  std::vector<std::uint32_t> flagged;
};

/// All-point-interpolated AP per class at one IoU threshold; mAP is the
/// mean over classes present in either side.
inline ApResult average_precision(const LabelGrid& pred, const ClassTable& pred_classes,
                                  const ScoreTable& pred_scores, const LabelGrid& gt,
                                  const ClassTable& gt_classes, double iou_threshold) {
  const IouTable t = iou_table(pred, gt);
  std::set<std::uint32_t> classes;
  for (auto id : t.pred_ids) classes.insert(class_of(pred_classes, id));
  for (auto id : t.gt_ids) classes.insert(class_of(gt_classes, id));

  ApResult res;
  for (auto cls : classes) {
    std::vector<std::size_t> preds, gts;
    for (std::size_t p = 0; p < t.pred_ids.size(); ++p)
      if (class_of(pred_classes, t.pred_ids[p]) == cls) preds.push_back(p);
    for (std::size_t g = 0; g < t.gt_ids.size(); ++g)
      if (class_of(gt_classes, t.gt_ids[g]) == cls) gts.push_back(g);
    if (gts.empty()) {
      res.per_class[cls] = 0.0;
      res.flagged.push_back(cls);
      continue;
    }
    std::stable_sort(preds.begin(), preds.end(), [&](std::size_t a, std::size_t b) {
      const auto sa = pred_scores.count(t.pred_ids[a]) ? pred_scores.at(t.pred_ids[a]) : 0.0;
      const auto sb = pred_scores.count(t.pred_ids[b]) ? pred_scores.at(t.pred_ids[b]) : 0.0;
      return sa > sb;
    });
    std::vector<bool> taken(gts.size(), false);
    std::vector<double> recall, precision;
    std::size_t tp = 0, fp = 0;
    for (auto p : preds) {
      std::optional<std::size_t> best;
      double best_iou = -1.0;
      for (std::size_t k = 0; k < gts.size(); ++k) {
        if (taken[k]) continue;
        const double v = t(p, gts[k]);
        if (v >= iou_threshold && v > best_iou) {
          best_iou = v;
          best = k;
        }
      }
      if (best) {
        taken[*best] = true;
        ++tp;
      } else {
        ++fp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    // Precision envelope, then area under the stepwise curve.
    for (std::size_t k = precision.size(); k-- > 1;)
      precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t k = 0; k < recall.size(); ++k) {
      ap += (recall[k] - prev_r) * precision[k];
      prev_r = recall[k];
    }
    res.per_class[cls] = ap;
  }
  if (!res.per_class.empty()) {
    double s = 0.0;
    for (const auto& [c, ap] : res.per_class) s += ap;
    res.mean_ap = s / static_cast<double>(res.per_class.size());
  }
  return res;
}

struct ApReport {
  double map50 = 0.0;
  double map70 = 0.0;
  double map75 = 0.0;
  /// class -> {AP@0.5, AP@0.7, AP@0.75}
  std::map<std::uint32_t, std::array<double, 3>> per_class;
  std::vector<std::uint32_t> flagged;
};

inline ApReport evaluate_ap(const LabelGrid& pred, const ClassTable& pred_classes,
                            const ScoreTable& pred_scores, const LabelGrid& gt,
                            const ClassTable& gt_classes) {
  ApReport rep;
  const double thresholds[3] = {0.5, 0.7, 0.75};
  double* slots[3] = {&rep.map50, &rep.map70, &rep.map75};
  for (int k = 0; k < 3; ++k) {
    const auto r = average_precision(pred, pred_classes, pred_scores, gt, gt_classes, thresholds[k]);
    *slots[k] = r.mean_ap;
    for (const auto& [c, ap] : r.per_class) rep.per_class[c][k] = ap;
    if (k == 0) rep.flagged = r.flagged;
  }
  return rep;
}

/// Pairs a label grid with an instance -> class table, deriving classes from
/// a semantic map when no table is provided.
inline ClassTable classes_from_semantic(const LabelGrid& instances, const LabelGrid& semantic) {
  ClassTable t;
  for (std::size_t i = 0; i < instances.size(); ++i)
    if (instances[i] && !t.count(instances[i])) t[instances[i]] = semantic[i];
  return t;
}

}  // namespace mdm

#endif  // MDM_EVAL_HPP
