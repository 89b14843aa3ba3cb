#include <gtest/gtest.h>

#include <map>
#include <set>

#include "mdm/components.hpp"
#include "mdm/scene.hpp"

using namespace mdm;

namespace {

std::set<std::uint32_t> ids_of(const LabelGrid& g) { return {g.begin(), g.end()}; }

bool same_scene(const Scene& a, const Scene& b) {
  return a.gt_instances == b.gt_instances && a.gt_semantic == b.gt_semantic &&
         a.instance_classes == b.instance_classes && a.points == b.points && a.features == b.features;
}

}  // namespace

TEST(GenerateScene, SameSeedSameScene) {
  EXPECT_TRUE(same_scene(generate_scene(1, 64, 64, 4, 3, ShapeKind::Mixed),
                         generate_scene(1, 64, 64, 4, 3, ShapeKind::Mixed)));
  EXPECT_FALSE(same_scene(generate_scene(1, 64, 64, 4, 3, ShapeKind::Mixed),
                          generate_scene(2, 64, 64, 4, 3, ShapeKind::Mixed)));
}

TEST(GenerateScene, TwoRectsGiveIdsZeroOneTwo) {
  const auto s = generate_scene(5, 64, 64, 2, 3, ShapeKind::Rect);
  EXPECT_EQ(ids_of(s.gt_instances), (std::set<std::uint32_t>{0, 1, 2}));
}

TEST(GenerateScene, PigeonholeSharesAClass) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = generate_scene(seed, 64, 64, 3, 2, ShapeKind::Mixed);
    std::map<std::uint32_t, int> per_class;
    for (std::size_t id = 1; id < s.instance_classes.size(); ++id) ++per_class[s.instance_classes[id]];
    int most = 0;
    for (auto [c, n] : per_class) most = std::max(most, n);
    EXPECT_GE(most, 2);
  }
}

TEST(GenerateScene, InvariantsHoldOnManySeeds) {
  for (std::uint64_t seed = 1; seed <= 60; ++seed) {
    const int n = static_cast<int>(2 + seed % 5);
    const auto kind = static_cast<ShapeKind>(seed % 3);
    const auto s = generate_scene(seed, 64, 64, n, 3, kind);
    ASSERT_EQ(max_label(s.gt_instances), static_cast<std::uint32_t>(n));
    std::vector<std::size_t> area(n + 1, 0);
    for (std::size_t i = 0; i < s.gt_instances.size(); ++i) {
      ++area[s.gt_instances[i]];
      EXPECT_EQ(s.gt_semantic[i] > 0, s.gt_instances[i] > 0);
      EXPECT_EQ(s.gt_semantic[i], s.instance_classes[s.gt_instances[i]]);
    }
    for (int id = 1; id <= n; ++id) EXPECT_GT(area[id], 0u);
    ASSERT_EQ(s.points.size(), static_cast<std::size_t>(n));
    EXPECT_NO_THROW(s.points.validate(s.shape()));
    for (const auto& p : s.points.points) {
      EXPECT_EQ(s.gt_instances(p.y, p.x), p.instance_id);
      EXPECT_EQ(s.instance_classes[p.instance_id], p.class_id);
    }
    EXPECT_EQ(s.features.channels(), kSceneFeatureChannels);
    EXPECT_TRUE(s.features.all_finite());
  }
}

TEST(GenerateScene, Errors) {
  EXPECT_THROW(generate_scene(1, 64, 64, 0, 3, ShapeKind::Rect), Error);
  EXPECT_THROW(generate_scene(1, 64, 64, 2, 0, ShapeKind::Rect), Error);
  try {
    generate_scene(1, 8, 8, 40, 3, ShapeKind::Rect);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "placement failed");
  }
}

TEST(CorruptSemantic, ZeroConfigIsIdentity) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = generate_scene(seed, 48, 48, 4, 3, ShapeKind::Mixed);
    EXPECT_EQ(corrupt_semantic(s, CorruptionConfig{}), s.gt_semantic);
  }
}

TEST(CorruptSemantic, MergeJoinsTouchingSameClassRects) {
  Scene s;
  s.n_classes = 1;
  s.gt_instances = LabelGrid(10, 12, 0);
  for (int y = 2; y < 7; ++y) {
    for (int x = 1; x < 5; ++x) s.gt_instances(y, x) = 1;
    for (int x = 7; x < 11; ++x) s.gt_instances(y, x) = 2;
  }
  s.instance_classes = {0, 1, 1};
  s.gt_semantic = LabelGrid(10, 12, 0);
  for (std::size_t i = 0; i < s.gt_semantic.size(); ++i) s.gt_semantic[i] = s.gt_instances[i] ? 1 : 0;
  EXPECT_EQ(max_label(connected_regions_by_value(s.gt_semantic)), 2u);
  CorruptionConfig cfg;
  cfg.merge_adjacent = true;
  EXPECT_EQ(max_label(connected_regions_by_value(corrupt_semantic(s, cfg))), 1u);
}

TEST(CorruptSemantic, FlipCountWithinBinomialBand) {
  const auto s = generate_scene(3, 64, 64, 4, 3, ShapeKind::Mixed);
  const double expected = 0.05 * 64 * 64;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    CorruptionConfig cfg;
    cfg.flip_rate = 0.05;
    cfg.rng_seed = seed;
    const auto out = corrupt_semantic(s, cfg);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < out.size(); ++i) diff += out[i] != s.gt_semantic[i];
    EXPECT_GE(diff, 0.8 * expected) << "seed " << seed;
    EXPECT_LE(diff, 1.2 * expected) << "seed " << seed;
    for (auto v : out) EXPECT_LE(v, s.n_classes);
  }
}

TEST(CorruptSemantic, DilationGrowsAndErosionShrinks) {
  const auto s = generate_scene(9, 64, 64, 3, 3, ShapeKind::Rect);
  auto fg = [](const LabelGrid& g) {
    std::size_t n = 0;
    for (auto v : g) n += v != 0;
    return n;
  };
  CorruptionConfig grow;
  grow.dilation_px = 2;
  CorruptionConfig shrink;
  shrink.erosion_px = 1;
  EXPECT_GT(fg(corrupt_semantic(s, grow)), fg(s.gt_semantic));
  EXPECT_LT(fg(corrupt_semantic(s, shrink)), fg(s.gt_semantic));
  CorruptionConfig bad;
  bad.flip_rate = 1.0;
  EXPECT_THROW(corrupt_semantic(s, bad), Error);
}

TEST(PickPoints, SquareCentroid) {
  LabelGrid g(5, 5, 0);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) g(y, x) = 1;
  const auto pts = pick_points(g, {0, 2}, PointMode::Centroid, 0);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts.points[0], (AnnotationPoint{1, 1, 2, 1}));
}

TEST(PickPoints, LShapeCentroidSnapsInside) {
  // Thin L: the centroid falls in the empty corner.
  LabelGrid g(6, 6, 0);
  for (int y = 0; y < 6; ++y) g(y, 0) = 1;
  for (int x = 0; x < 6; ++x) g(5, x) = 1;
  const auto pts = pick_points(g, {0, 1}, PointMode::Centroid, 0);
  const auto& p = pts.points[0];
  EXPECT_EQ(g(p.y, p.x), 1u);
}

TEST(PickPoints, RandomInteriorIsDeterministicAndInside) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = generate_scene(seed, 64, 64, 5, 3, ShapeKind::Mixed);
    const auto a = pick_points(s.gt_instances, s.instance_classes, PointMode::RandomInterior, seed);
    const auto b = pick_points(s.gt_instances, s.instance_classes, PointMode::RandomInterior, seed);
    EXPECT_EQ(a, b);
    for (const auto& p : a.points) EXPECT_EQ(s.gt_instances(p.y, p.x), p.instance_id);
  }
}

TEST(ShapeKindNames, RoundTrip) {
  for (auto k : {ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Mixed})
    EXPECT_EQ(shape_kind_from_string(to_string(k)), k);
  for (auto m : {PointMode::Centroid, PointMode::RandomInterior})
    EXPECT_EQ(point_mode_from_string(to_string(m)), m);
  EXPECT_THROW(shape_kind_from_string("hexagon"), Error);
}
