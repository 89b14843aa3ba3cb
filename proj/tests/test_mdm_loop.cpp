#include <gtest/gtest.h>

#include <set>

#include "mdm/mdm_loop.hpp"
#include "mdm/selftest.hpp"

using namespace mdm;

namespace {

MdmConfig small_config(std::uint64_t seed) {
  MdmConfig cfg;
  cfg.seed = seed;
  cfg.warmup_iters = 20;
  cfg.iters_per_stage = 30;
  cfg.n_stages = 2;
  return cfg;
}

Scene small_scene(std::uint64_t seed) { return generate_scene(seed, 24, 24, 3, 2, ShapeKind::Mixed); }

}  // namespace

TEST(Predictor, ZeroWeightsGiveZeroOutputs) {
  const auto s = small_scene(1);
  auto p = init_predictor(s.features.channels(), 2, 8, 1);
  std::fill(p.weights.begin(), p.weights.end(), 0.0);
  std::fill(p.bias.begin(), p.bias.end(), 0.0);
  const auto o = predict(p, s.features);
  for (double v : o.class_map.data()) EXPECT_EQ(v, 0.0);
  for (double v : o.embeddings.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(o.offsets.valid_count(), s.shape().size());
  for (std::size_t i = 0; i < s.shape().size(); ++i) EXPECT_EQ(o.offsets.dy(i), 0.0);
  EXPECT_EQ(sigmoid(affinity_logit(o.embeddings, 0, 5)), 0.5);
}

TEST(Predictor, DeterministicInitAndOutput) {
  const auto s = small_scene(2);
  const auto a = init_predictor(s.features.channels(), 2, 8, 42);
  const auto b = init_predictor(s.features.channels(), 2, 8, 42);
  EXPECT_EQ(a, b);
  const double bound = 1.0 / std::sqrt(2.0 * s.features.channels());
  for (double w : a.weights) EXPECT_LE(std::abs(w), bound);
  EXPECT_EQ(predict(a, s.features).class_map, predict(b, s.features).class_map);
  EXPECT_NE(a, init_predictor(s.features.channels(), 2, 8, 43));
}

TEST(Predictor, PerturbingOneWeightTouchesOneHead) {
  const auto s = small_scene(3);
  const auto p = init_predictor(s.features.channels(), 2, 8, 3);
  const auto base = predict(p, s.features);
  auto q = p;
  q.weights[p.offset_row() * p.expanded_dim() + 1] += 0.3;
  const auto o = predict(q, s.features);
  EXPECT_EQ(o.class_map, base.class_map);
  EXPECT_EQ(o.embeddings, base.embeddings);
  EXPECT_NE(o.offsets, base.offsets);
}

TEST(Predictor, ShapeMismatch) {
  const auto s = small_scene(4);
  const auto p = init_predictor(3, 2, 8, 1);
  EXPECT_THROW(predict(p, s.features), Error);
}

TEST(Predictor, ExpandedFeaturesAverageNeighbours) {
  FeatureMap f(2, 2, 1, std::vector<double>{1, 2, 3, 4});
  const auto e = expand_features(f);
  EXPECT_EQ(e.channels(), 2u);
  EXPECT_DOUBLE_EQ(e.row(0)[1], 2.5);
  EXPECT_DOUBLE_EQ(e.row(3)[0], 4.0);
}

TEST(TrainStep, ZeroLearningRateIsNoOp) {
  const auto s = small_scene(5);
  auto cfg = small_config(5);
  cfg.learning_rate = 0.0;
  const auto expanded = expand_features(s.features);
  const auto targets = make_stage_targets(s.gt_semantic, s.points, cfg, 1);
  const auto p = init_predictor(s.features.channels(), s.n_classes, 8, 5);
  const auto r = train_step(p, expanded, targets, cfg);
  EXPECT_EQ(r.params, p);
  EXPECT_NEAR(r.report.total,
              r.report.seg + cfg.loss_weights.lambda_off * r.report.off + r.report.aff, 1e-9);
  EXPECT_GT(r.report.n_pos_pairs, 0u);
}

TEST(TrainStep, LossMostlyNonIncreasingOverWindows) {
  int good_runs = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = generate_scene(seed, 12, 12, 2, 2, ShapeKind::Rect);
    auto cfg = small_config(seed);
    const auto expanded = expand_features(s.features);
    const auto targets = make_stage_targets(s.gt_semantic, s.points, cfg, seed);
    auto p = init_predictor(s.features.channels(), s.n_classes, 8, seed, cfg.offset_scale);
    std::vector<double> totals;
    for (int it = 0; it < 200; ++it) {
      auto r = train_step(p, expanded, targets, cfg);
      totals.push_back(r.report.total);
      p = std::move(r.params);
    }
    bool ok = true;
    for (std::size_t k = 50; k < totals.size(); k += 50) ok = ok && totals[k] <= totals[k - 50];
    good_runs += ok;
  }
  EXPECT_GE(good_runs, 19);  // >= 95% of 20
}

TEST(TrainStep, DivergenceIsReported) {
  const auto s = small_scene(6);
  auto cfg = small_config(6);
  const auto expanded = expand_features(s.features);
  const auto targets = make_stage_targets(s.gt_semantic, s.points, cfg, 1);
  auto p = init_predictor(s.features.channels(), s.n_classes, 8, 6);
  p.weights[0] = std::numeric_limits<double>::infinity();
  try {
    train_step(p, expanded, targets, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos) << e.what();
  }
}

TEST(TrainStep, HeadSeparationOfUpdates) {
  // Without affinity pairs the embedding rows receive no gradient.
  const auto s = small_scene(7);
  auto cfg = small_config(7);
  const auto expanded = expand_features(s.features);
  const auto targets = make_stage_targets(s.gt_semantic, s.points, cfg, std::nullopt);
  const auto p = init_predictor(s.features.channels(), s.n_classes, 8, 7);
  const auto q = train_step(p, expanded, targets, cfg).params;
  const std::size_t in = p.expanded_dim();
  for (std::size_t o = p.embed_row(); o < p.out_dim(); ++o) {
    for (std::size_t k = 0; k < in; ++k) EXPECT_EQ(q.weights[o * in + k], p.weights[o * in + k]);
    EXPECT_EQ(q.bias[o], p.bias[o]);
  }
  EXPECT_NE(q.weights[0], p.weights[0]);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  const auto s = generate_scene(8, 8, 8, 2, 2, ShapeKind::Rect);
  auto cfg = small_config(8);
  cfg.loss_weights.hard_pixel_ratio = 1.0;
  cfg.i2s.max_pairs = 40;
  const auto expanded = expand_features(s.features);
  const auto targets = make_stage_targets(s.gt_semantic, s.points, cfg, 8);
  const auto p = init_predictor(s.features.channels(), s.n_classes, 8, 8, 0.5);
  auto f = [&](std::span<const double> x) {
    auto q = p;
    q.assign(x);
    auto o = objective(q, expanded, targets, cfg.loss_weights);
    return std::pair{o.report.total, o.grad};
  };
  EXPECT_TRUE(grad_check(f, p.flatten(), 1e-5, 1e-4).passed);
}

TEST(RunStage, OracleOffsetsOnCleanSemanticsReproduceGt) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = generate_scene(seed, 32, 32, 3, 3, ShapeKind::Mixed);
    auto cfg = small_config(seed);
    cfg.oracle_offsets = true;
    cfg.iters_per_stage = 2;
    const auto expanded = expand_features(s.features);
    const auto p = init_predictor(s.features.channels(), s.n_classes, 8, seed);
    const auto out = run_stage(0, s.gt_semantic, s, expanded, p, cfg);
    const auto m = greedy_match(out.pseudo.instances, out.pseudo.classes, s.gt_instances, gt_class_table(s));
    EXPECT_EQ(m.overall_iou, 100.0);
  }
}

TEST(RunStage, SemanticOutUsesOnlyAnnotatedClasses) {
  auto s = generate_scene(9, 32, 32, 2, 3, ShapeKind::Rect);
  auto cfg = small_config(9);
  const auto expanded = expand_features(s.features);
  const auto p = init_predictor(s.features.channels(), s.n_classes, 8, 9);
  const auto out = run_stage(0, s.gt_semantic, s, expanded, p, cfg);
  std::set<std::uint32_t> allowed{0};
  for (const auto& pt : s.points.points) allowed.insert(pt.class_id);
  for (auto v : out.semantic_out) EXPECT_TRUE(allowed.count(v)) << v;
  EXPECT_EQ(out.losses.size(), static_cast<std::size_t>(cfg.iters_per_stage));
}

TEST(RunStage, EmittedInstancesAreAffineInside) {
  const auto s = small_scene(10);
  auto cfg = small_config(10);
  const auto expanded = expand_features(s.features);
  const auto p = init_predictor(s.features.channels(), s.n_classes, 8, 10);
  const auto out = run_stage(0, s.gt_semantic, s, expanded, p, cfg);
  if (max_label(out.pseudo.instances) == 0) GTEST_SKIP() << "no instances emitted";
  const auto set = build_affinity_targets(out.pseudo.instances, cfg.i2s, 3);
  for (std::size_t t = 0; t < set.size(); ++t) {
    const auto a = out.pseudo.instances[set.pairs[t].i], b = out.pseudo.instances[set.pairs[t].j];
    if (a != 0 && a == b) EXPECT_EQ(set.targets[t], 1);
  }
}

TEST(RunMdm, OneStageNoWarmup) {
  const auto s = small_scene(11);
  auto cfg = small_config(11);
  cfg.n_stages = 1;
  cfg.warmup_iters = 0;
  const auto run = run_mdm(s, s.gt_semantic, cfg);
  EXPECT_EQ(run.stages.size(), 1u);
  EXPECT_TRUE(run.warmup_losses.empty());
}

TEST(RunMdm, WarmupHasNoAffinityTerm) {
  const auto s = small_scene(12);
  const auto run = run_mdm(s, s.gt_semantic, small_config(12));
  ASSERT_EQ(run.warmup_losses.size(), 20u);
  for (const auto& r : run.warmup_losses) {
    EXPECT_EQ(r.aff, 0.0);
    EXPECT_EQ(r.n_pos_pairs + r.n_neg_pairs, 0u);
  }
  for (const auto& r : run.stages[0].losses) EXPECT_GT(r.n_pos_pairs, 0u);
}

TEST(RunMdm, StagesChainAndRunsAreDeterministic) {
  const auto s = small_scene(13);
  CorruptionConfig cc;
  cc.dilation_px = 1;
  cc.flip_rate = 0.02;
  cc.rng_seed = 13;
  const auto corrupted = corrupt_semantic(s, cc);
  const auto a = run_mdm(s, corrupted, small_config(13));
  const auto b = run_mdm(s, corrupted, small_config(13));
  ASSERT_EQ(a.stages.size(), 2u);
  EXPECT_EQ(a.stages[0].semantic_in, corrupted);
  EXPECT_EQ(a.stages[1].semantic_in, a.stages[0].semantic_out);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.stages[k].pseudo.instances, b.stages[k].pseudo.instances);
    EXPECT_EQ(a.stages[k].semantic_out, b.stages[k].semantic_out);
  }
  EXPECT_EQ(a.params, b.params);
}

TEST(MdmConfig, Validation) {
  MdmConfig c;
  c.n_stages = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.offset_scale = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.loss_weights.hard_pixel_ratio = 1.5;
  EXPECT_THROW(c.validate(), Error);
}
