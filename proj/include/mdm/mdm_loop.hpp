#ifndef MDM_MDM_LOOP_HPP
#define MDM_MDM_LOOP_HPP

// The staged mutual-distillation loop. Each stage turns its semantic input
// into instance targets (S2I), trains the predictor on class, offset and
// affinity objectives, groups the predicted offsets into pseudo labels, and
// refreshes the predicted class map through the predicted affinity (I2S) to
// produce the next stage's semantic input.

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mdm/eval.hpp"
#include "mdm/grid.hpp"
#include "mdm/i2s.hpp"
#include "mdm/losses.hpp"
#include "mdm/predictor.hpp"
#include "mdm/rng.hpp"
#include "mdm/s2i.hpp"
#include "mdm/scene.hpp"

namespace mdm {

struct MdmConfig {
  int n_stages = 3;
  int warmup_iters = 200;
  int iters_per_stage = 800;
  double learning_rate = 0.5;
  std::size_t embed_dim = 8;
  /// Fixed gain of the predictor's offset head, in pixels.
  double offset_scale = 8.0;
  Connectivity connectivity = Connectivity::Eight;
  LossWeights loss_weights;
  GroupingConfig grouping;
  I2SConfig i2s;
  std::uint64_t seed = 0;
  /// Group with offsets computed from the gt instances instead of the
  /// predicted ones. Testing aid.
  bool oracle_offsets = false;

  void validate() const {
    if (n_stages < 1) throw Error("n_stages must be >= 1");
    if (warmup_iters < 0 || iters_per_stage < 0) throw Error("iteration counts must be >= 0");
    if (!(learning_rate >= 0.0)) throw Error("learning_rate must be >= 0");
    if (embed_dim == 0) throw Error("embed_dim must be >= 1");
    if (!(offset_scale > 0.0)) throw Error("offset_scale must be > 0");
    loss_weights.validate();
    grouping.validate();
    i2s.validate();
  }
};

struct StageTargets {
  LabelGrid instances;
  LabelGrid classes;
  OffsetField offsets;
  std::vector<double> offset_weights;
  std::optional<AffinitySampleSet> pairs;
};

/// S2I target construction from a semantic map and the scene's points.
inline StageTargets make_stage_targets(const LabelGrid& semantic, const PointAnnotationSet& points,
                                       const MdmConfig& cfg, std::optional<std::uint64_t> pair_seed) {
  StageTargets t;
  const auto regions = extract_regions(semantic, cfg.connectivity);
  t.instances = assign_points(regions, points, semantic.shape());
  t.classes = classes_from_instances(t.instances, points);
  t.offsets = compute_offset_field(t.instances, points);
  t.offset_weights = offset_pixel_weights(t.instances, cfg.loss_weights.offset_pixel_weight_mode);
  if (pair_seed) {
    try {
      t.pairs = build_affinity_targets(t.instances, cfg.i2s, *pair_seed);
    } catch (const Error&) {
      t.pairs.reset();  // all background: nothing to supervise
    }
  }
  return t;
}

struct ObjectiveResult {
  LossReport report;
  std::vector<double> grad;  ///< flattened like TinyPredictorParams::flatten
};

/// Weighted total of the three objectives and its parameter gradient.
/// Terms without supervision (no valid offsets, no pairs) contribute 0.
inline ObjectiveResult objective(const TinyPredictorParams& params, const FeatureMap& expanded,
                                 const StageTargets& targets, const LossWeights& w) {
  const GridShape shape = expanded.shape();
  const std::size_t out = params.out_dim(), C1 = params.class_dim(), D = params.embed_dim;
  const auto z = linear_outputs(params, expanded);
  const auto o = outputs_from_linear(params, shape, z);
  std::vector<double> gz(z.size(), 0.0);

  const auto seg = seg_loss_ohem(o.class_map, targets.classes, w.hard_pixel_ratio);
  for (std::size_t i = 0; i < shape.size(); ++i)
    for (std::size_t c = 0; c < C1; ++c) gz[i * out + c] += w.lambda_seg * seg.grad[i * C1 + c];

  double off_value = 0.0;
  std::size_t n_off = 0;
  if (targets.offsets.valid_count() > 0) {
    const auto off = offset_loss(o.offsets, targets.offsets, targets.offset_weights);
    off_value = off.value;
    n_off = off.n_pixels;
    const double k = w.lambda_off * params.offset_scale;
    for (std::size_t i = 0; i < shape.size(); ++i) {
      gz[i * out + params.offset_row()] += k * off.grad[2 * i];
      gz[i * out + params.offset_row() + 1] += k * off.grad[2 * i + 1];
    }
  }

  double aff_value = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  if (targets.pairs && !targets.pairs->pairs.empty()) {
    AffinitySampleSet s = *targets.pairs;
    for (std::size_t t = 0; t < s.size(); ++t)
      s.pred_logits[t] = affinity_logit(o.embeddings, s.pairs[t].i, s.pairs[t].j);
    const auto aff = affinity_loss(s);
    aff_value = aff.value;
    n_pos = aff.n_pos;
    n_neg = aff.n_neg;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
    for (std::size_t t = 0; t < s.size(); ++t) {
      const double g = w.lambda_aff * aff.grad[t] * inv_sqrt_d;
      const auto i = s.pairs[t].i, j = s.pairs[t].j;
      const auto ei = o.embeddings.row(i), ej = o.embeddings.row(j);
      for (std::size_t d = 0; d < D; ++d) {
        gz[i * out + params.embed_row() + d] += g * ej[d];
        gz[j * out + params.embed_row() + d] += g * ei[d];
      }
    }
  }

  ObjectiveResult r;
  r.report = total_loss(seg.value, off_value, aff_value, w);
  r.report.n_seg_pixels = seg.n_selected;
  r.report.n_off_pixels = n_off;
  r.report.n_pos_pairs = n_pos;
  r.report.n_neg_pairs = n_neg;
  r.grad = linear_backward(params, expanded, gz);
  return r;
}

struct TrainStepResult {
  TinyPredictorParams params;
  LossReport report;  ///< before the update
};

/// One plain gradient-descent step on the weighted objective.
inline TrainStepResult train_step(const TinyPredictorParams& params, const FeatureMap& expanded,
                                  const StageTargets& targets, const MdmConfig& cfg) {
  require_same_shape(expanded.shape(), targets.classes.shape(), "features vs targets");
  ObjectiveResult obj;
  try {
    obj = objective(params, expanded, targets, cfg.loss_weights);
  } catch (const Error& e) {
    if (std::string(e.what()).find("finite") != std::string::npos)
      throw Error("diverged: non-finite loss component");
    throw;
  }
  const auto& r = obj.report;
  if (!std::isfinite(r.seg)) throw Error("diverged: seg loss is not finite");
  if (!std::isfinite(r.off)) throw Error("diverged: offset loss is not finite");
  if (!std::isfinite(r.aff)) throw Error("diverged: affinity loss is not finite");
  if (!std::isfinite(r.total)) throw Error("diverged: total loss is not finite");

  TrainStepResult out{params, r};
  if (cfg.learning_rate != 0.0) {
    auto flat = params.flatten();
    for (std::size_t k = 0; k < flat.size(); ++k) flat[k] -= cfg.learning_rate * obj.grad[k];
    out.params.assign(flat);
  }
  return out;
}

struct StageOutput {
  PseudoLabels pseudo;
  LabelGrid semantic_out;
  TinyPredictorParams params;
  StageTargets targets;
  std::vector<LossReport> losses;
};

/// I2S: softmax of the predicted class scores, classes absent from the
/// points zeroed, refreshed through the predicted soft affinity within
/// pair_radius, then argmax.
inline LabelGrid refresh_from_prediction(const PredictorOutputs& o, const PointAnnotationSet& points,
                                         const I2SConfig& cfg) {
  ClassScoreMap prob = softmax_rows(o.class_map);
  std::vector<bool> present(prob.channels(), false);
  present[0] = true;
  for (const auto& p : points.points)
    if (p.class_id < present.size()) present[p.class_id] = true;
  for (std::size_t i = 0; i < prob.pixels(); ++i) {
    auto row = prob.row(i);
    for (std::size_t c = 0; c < row.size(); ++c)
      if (!present[c]) row[c] = 0.0;
  }
  const auto& emb = o.embeddings;
  const auto refreshed = refresh_semantic_windowed(
      [&emb](std::size_t i, std::size_t j) { return i == j ? 1.0 : sigmoid(affinity_logit(emb, i, j)); },
      prob, cfg);
  return argmax_classes(refreshed);
}

inline StageOutput run_stage(int stage_idx, const LabelGrid& semantic_in, const Scene& scene,
                             const FeatureMap& expanded, const TinyPredictorParams& params,
                             const MdmConfig& cfg) {
  cfg.validate();
  require_same_shape(semantic_in.shape(), scene.shape(), "semantic input vs scene");
  StageOutput out;
  out.targets = make_stage_targets(semantic_in, scene.points, cfg,
                                   derive_seed(cfg.seed, 0x57a9e000ULL + static_cast<std::uint64_t>(stage_idx)));

  out.params = params;
  out.losses.reserve(static_cast<std::size_t>(cfg.iters_per_stage));
  for (int it = 0; it < cfg.iters_per_stage; ++it) {
    auto step = train_step(out.params, expanded, out.targets, cfg);
    out.params = std::move(step.params);
    out.losses.push_back(step.report);
  }

  const auto pred = predict_expanded(out.params, expanded);
  const OffsetField oracle =
      cfg.oracle_offsets ? compute_offset_field(scene.gt_instances, scene.points) : OffsetField{};
  const auto grouped = group_instances(cfg.oracle_offsets ? oracle : pred.offsets, semantic_in,
                                       scene.points, cfg.grouping);
  out.pseudo = finalize_pseudo_labels(grouped, semantic_in, scene.points);
  out.semantic_out = refresh_from_prediction(pred, scene.points, cfg.i2s);
  return out;
}

struct StageRecord {
  int index = 0;
  LabelGrid semantic_in;
  PseudoLabels pseudo;
  LabelGrid semantic_out;
  MatchReport match;
  ApReport ap;
  std::vector<LossReport> losses;
};

struct MdmRun {
  std::vector<LossReport> warmup_losses;
  /// Quality of the untrained S2I labels built from the corrupted map.
  MatchReport initial_match;
  std::vector<StageRecord> stages;
  TinyPredictorParams params;
};

inline ClassTable gt_class_table(const Scene& scene) {
  ClassTable t;
  for (std::uint32_t id = 1; id < scene.instance_classes.size(); ++id) t[id] = scene.instance_classes[id];
  return t;
}

/// Quality of a pseudo-label map against the scene's gt (class-agnostic
/// matching, class-aware AP with area as confidence).
inline void score_stage(const Scene& scene, StageRecord& rec) {
  const auto gt_classes = gt_class_table(scene);
  rec.match = greedy_match(rec.pseudo.instances, rec.pseudo.classes, scene.gt_instances, gt_classes,
                           {.class_aware = false});
  rec.ap = evaluate_ap(rec.pseudo.instances, rec.pseudo.classes, area_scores(rec.pseudo.instances),
                       scene.gt_instances, gt_classes);
}

inline MdmRun run_mdm(const Scene& scene, const LabelGrid& corrupted_semantic, const MdmConfig& cfg) {
  cfg.validate();
  require_same_shape(corrupted_semantic.shape(), scene.shape(), "corrupted semantic vs scene");
  const FeatureMap expanded = expand_features(scene.features);

  MdmRun run;
  run.params = init_predictor(scene.features.channels(), scene.n_classes, cfg.embed_dim,
                              derive_seed(cfg.seed, 0x9a7a), cfg.offset_scale);

  // Warm-up on the stage-0 targets without the affinity term.
  {
    const auto warm = make_stage_targets(corrupted_semantic, scene.points, cfg, std::nullopt);
    const auto gt_classes = gt_class_table(scene);
    const auto initial = finalize_pseudo_labels(warm.instances, corrupted_semantic, scene.points);
    run.initial_match = greedy_match(initial.instances, initial.classes, scene.gt_instances,
                                     gt_classes, {.class_aware = false});
    run.warmup_losses.reserve(static_cast<std::size_t>(cfg.warmup_iters));
    for (int it = 0; it < cfg.warmup_iters; ++it) {
      auto step = train_step(run.params, expanded, warm, cfg);
      run.params = std::move(step.params);
      run.warmup_losses.push_back(step.report);
    }
  }

  LabelGrid semantic = corrupted_semantic;
  for (int s = 0; s < cfg.n_stages; ++s) {
    auto out = run_stage(s, semantic, scene, expanded, run.params, cfg);
    StageRecord rec;
    rec.index = s;
    rec.semantic_in = semantic;
    rec.pseudo = std::move(out.pseudo);
    rec.semantic_out = out.semantic_out;
    rec.losses = std::move(out.losses);
    score_stage(scene, rec);
    run.params = std::move(out.params);
    semantic = std::move(out.semantic_out);
    run.stages.push_back(std::move(rec));
  }
  return run;
}

}  // namespace mdm

#endif  // MDM_MDM_LOOP_HPP
