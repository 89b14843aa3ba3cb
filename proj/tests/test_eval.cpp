#include <gtest/gtest.h>

#include "mdm/eval.hpp"
#include "mdm/rng.hpp"
#include "mdm/selftest.hpp"

using namespace mdm;

namespace {

Mask box(int y0, int x0, int h, int w) {
  Mask m(6, 6, 0);
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) m(y, x) = 1;
  return m;
}

LabelGrid relabel(const LabelGrid& g, const std::vector<std::uint32_t>& perm) {
  LabelGrid out = g;
  for (auto& v : out) v = perm[v];
  return out;
}

}  // namespace

TEST(MaskIou, Cases) {
  EXPECT_EQ(mask_iou(box(0, 0, 2, 2), box(0, 0, 2, 2)), 1.0);
  EXPECT_EQ(mask_iou(box(0, 0, 2, 2), box(3, 3, 2, 2)), 0.0);
  EXPECT_NEAR(mask_iou(box(0, 0, 2, 2), box(0, 1, 2, 2)), 2.0 / 6.0, 1e-12);
  try {
    mask_iou(Mask(2, 2, 0), Mask(2, 2, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("IoU undefined"), std::string::npos);
  }
}

TEST(GreedyMatch, Identity) {
  LabelGrid g(4, 4, 0);
  g(0, 0) = 1;
  g(3, 3) = 2;
  g(3, 2) = 2;
  const auto r = greedy_match(g, {}, g, {});
  EXPECT_EQ(r.overall_iou, 100.0);
  EXPECT_EQ(r.counts.iou90, 2u);
  for (const auto& m : r.per_gt) EXPECT_EQ(m.matched_pred, m.gt_id);
}

TEST(GreedyMatch, EmptyPrediction) {
  LabelGrid g(4, 4, 0);
  g(1, 1) = 1;
  const auto r = greedy_match(LabelGrid(4, 4, 0), {}, g, {});
  EXPECT_EQ(r.overall_iou, 0.0);
  EXPECT_EQ(r.counts.iou50, 0u);
  EXPECT_FALSE(r.per_gt[0].matched_pred.has_value());
}

TEST(GreedyMatch, GreedyDiffersFromOptimalAssignment) {
  // Large pred 1 spans gt 1 (IoU 8/17) and gt 2 (IoU 7/18); small pred 2
  // only touches gt 1 (IoU 0.2). Greedy gives gt 1 to pred 1 and strands
  // pred 2, although pred 1 -> gt 2 plus pred 2 -> gt 1 has a larger sum.
  LabelGrid gt(1, 20, 0), pred(1, 20, 0);
  for (int x = 0; x < 10; ++x) gt(0, x) = 1;
  for (int x = 10; x < 20; ++x) gt(0, x) = 2;
  for (int x = 0; x < 2; ++x) pred(0, x) = 2;
  for (int x = 2; x < 17; ++x) pred(0, x) = 1;
  const auto r = greedy_match(pred, {}, gt, {});
  EXPECT_EQ(r.per_gt[0].matched_pred, 1u);
  EXPECT_NEAR(r.per_gt[0].iou, 8.0 / 17.0, 1e-12);
  EXPECT_FALSE(r.per_gt[1].matched_pred.has_value());
  EXPECT_EQ(r.unmatched_preds, (std::vector<std::uint32_t>{2}));
  EXPECT_NEAR(r.overall_iou, 100.0 * (8.0 / 17.0) / 3.0, 1e-12);
  const auto o = oracle::exhaustive_match(pred, gt);
  EXPECT_EQ(o.gt_to_pred.at(1), 1u);
  EXPECT_EQ(o.unmatched_preds, r.unmatched_preds);
  EXPECT_NEAR(o.overall_iou, r.overall_iou, 1e-12);
}

TEST(GreedyMatch, UnmatchedPredictionsCountAsZerosByDefault) {
  LabelGrid gt(1, 4, std::vector<std::uint32_t>{1, 1, 0, 0});
  LabelGrid pred(1, 4, std::vector<std::uint32_t>{1, 1, 0, 2});
  EXPECT_NEAR(greedy_match(pred, {}, gt, {}).overall_iou, 50.0, 1e-12);
  EXPECT_NEAR(greedy_match(pred, {}, gt, {}, {.count_unmatched_predictions = false}).overall_iou, 100.0, 1e-12);
}

TEST(GreedyMatch, ClassAwareSkipsOtherClasses) {
  LabelGrid g(1, 4, std::vector<std::uint32_t>{1, 1, 0, 0});
  const auto aware = greedy_match(g, {{1, 2}}, g, {{1, 1}}, {.class_aware = true});
  EXPECT_FALSE(aware.per_gt[0].matched_pred.has_value());
  const auto agnostic = greedy_match(g, {{1, 2}}, g, {{1, 1}});
  EXPECT_TRUE(agnostic.per_gt[0].matched_pred.has_value());
}

TEST(GreedyMatch, InvariantToRelabeling) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const auto pred = detail::random_rects(rng, 8, 8, 4);
    const auto gt = detail::random_rects(rng, 8, 8, 4);
    std::vector<std::uint32_t> perm{0, 1, 2, 3, 4};
    for (int k = 4; k > 1; --k) std::swap(perm[k], perm[rng.uniform_int(1, k)]);
    const auto a = greedy_match(pred, {}, gt, {});
    const auto b = greedy_match(relabel(pred, perm), {}, relabel(gt, perm), {});
    // Ties in area or IoU can legitimately resolve differently after relabeling;
    // skip those cases.
    const auto table = iou_table(pred, gt);
    std::set<std::size_t> areas(table.pred_area.begin(), table.pred_area.end());
    std::set<double> ious(table.iou.begin(), table.iou.end());
    std::size_t nonzero = 0;
    for (double v : table.iou) nonzero += v > 0;
    if (areas.size() != table.pred_area.size() || ious.size() - ious.count(0.0) != nonzero) continue;
    EXPECT_NEAR(a.overall_iou, b.overall_iou, 1e-9);
    EXPECT_EQ(a.counts.iou50, b.counts.iou50);
  }
}

TEST(GreedyMatch, OverallHundredIffEqualUpToRelabeling) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const auto g = detail::random_rects(rng, 6, 6, 3);
    const auto p = t % 2 ? g : detail::random_rects(rng, 6, 6, 3);
    const bool equal = compact_labels(p) == compact_labels(g);
    EXPECT_EQ(greedy_match(p, {}, g, {}).overall_iou == 100.0, equal);
  }
}

TEST(GreedyMatch, CountsMonotone) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const auto r = greedy_match(detail::random_rects(rng, 8, 8, 5), {}, detail::random_rects(rng, 8, 8, 5), {});
    EXPECT_GE(r.counts.iou50, r.counts.iou70);
    EXPECT_GE(r.counts.iou70, r.counts.iou90);
  }
}

TEST(GreedyMatch, ExhaustiveOracleSuite) { EXPECT_TRUE(check_evaluator(300).passed); }

TEST(AveragePrecision, HandCases) {
  LabelGrid gt(4, 4, 0);
  gt(0, 0) = gt(0, 1) = gt(1, 0) = gt(1, 1) = 1;
  const ClassTable c{{1, 1}};
  EXPECT_EQ(average_precision(gt, c, {{1, 1.0}}, gt, c, 0.5).mean_ap, 1.0);
  LabelGrid miss(4, 4, 0);
  miss(3, 3) = 1;
  EXPECT_EQ(average_precision(miss, c, {{1, 1.0}}, gt, c, 0.5).mean_ap, 0.0);
  LabelGrid two = gt;
  two(3, 3) = 2;
  EXPECT_EQ(average_precision(two, {{1, 1}, {2, 1}}, {{1, 0.9}, {2, 0.1}}, gt, c, 0.5).mean_ap, 1.0);
  // FP ranked first: precision 1/2 at recall 1.
  EXPECT_EQ(average_precision(two, {{1, 1}, {2, 1}}, {{1, 0.1}, {2, 0.9}}, gt, c, 0.5).mean_ap, 0.5);
}

TEST(AveragePrecision, ClassWithoutGtIsFlagged) {
  LabelGrid g(1, 4, std::vector<std::uint32_t>{1, 1, 0, 0});
  LabelGrid p(1, 4, std::vector<std::uint32_t>{1, 1, 0, 2});
  const auto r = average_precision(p, {{1, 1}, {2, 3}}, area_scores(p), g, {{1, 1}}, 0.5);
  EXPECT_EQ(r.per_class.at(1), 1.0);
  EXPECT_EQ(r.per_class.at(3), 0.0);
  EXPECT_EQ(r.flagged, (std::vector<std::uint32_t>{3}));
  EXPECT_EQ(r.mean_ap, 0.5);
}

TEST(AveragePrecision, MonotoneInThreshold) {
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const auto p = detail::random_rects(rng, 8, 8, 4);
    const auto g = detail::random_rects(rng, 8, 8, 4);
    double prev = 2.0;
    for (double thr : {0.1, 0.3, 0.5, 0.7, 0.75, 0.9}) {
      const double ap = average_precision(p, {}, area_scores(p), g, {}, thr).mean_ap;
      EXPECT_GE(ap, 0.0);
      EXPECT_LE(ap, prev + 1e-12);
      prev = ap;
    }
  }
}

TEST(EvaluateAp, ReportsThreeThresholds) {
  LabelGrid g(4, 4, 0);
  g(0, 0) = g(0, 1) = 1;
  LabelGrid p(4, 4, 0);
  p(0, 0) = p(0, 1) = p(0, 2) = 1;  // IoU 2/3
  const auto r = evaluate_ap(p, {{1, 1}}, area_scores(p), g, {{1, 1}});
  EXPECT_EQ(r.map50, 1.0);
  EXPECT_EQ(r.map70, 0.0);
  EXPECT_EQ(r.map75, 0.0);
}
