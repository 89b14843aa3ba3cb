#ifndef MDM_SELFTEST_HPP
#define MDM_SELFTEST_HPP

// Oracle and gradient-check suites shared by the acceptance binary and the
// `selftest` subcommand. Every oracle here is written independently of the
// production code it checks: flood fill for component labeling, per-pixel
// brute force for the nearest-point split, an explicit matrix product for
// the affinity refresh, and exhaustive search for greedy matching.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mdm/codec.hpp"
#include "mdm/components.hpp"
#include "mdm/eval.hpp"
#include "mdm/i2s.hpp"
#include "mdm/losses.hpp"
#include "mdm/mdm_loop.hpp"
#include "mdm/predictor.hpp"
#include "mdm/rng.hpp"
#include "mdm/s2i.hpp"
#include "mdm/scene.hpp"

namespace mdm {

// ------------------------------------------------------------ benchmark

/// The default synthetic benchmark: 64x64, 2-6 instances, 3 classes.
struct BenchmarkCase {
  Scene scene;
  LabelGrid corrupted;
  MdmConfig config;
};

inline CorruptionConfig benchmark_corruption(std::uint64_t seed) {
  CorruptionConfig c;
  c.dilation_px = 2;
  c.merge_adjacent = true;
  c.flip_rate = 0.02;
  c.rng_seed = seed;
  return c;
}

inline int benchmark_instance_count(std::uint64_t seed) {
  Rng r(derive_seed(seed, 1));
  return static_cast<int>(r.uniform_int(2, 6));
}

inline BenchmarkCase benchmark_case(std::uint64_t seed) {
  BenchmarkCase b;
  b.scene = generate_scene(seed, 64, 64, benchmark_instance_count(seed), 3, ShapeKind::Mixed);
  b.corrupted = corrupt_semantic(b.scene, benchmark_corruption(seed));
  b.config.seed = seed;
  return b;
}

// ------------------------------------------------------------ oracles

namespace oracle {

/// Breadth-first flood fill; ids in raster order of each component's first pixel.
inline LabelGrid flood_fill(const Mask& m, int conn) {
  LabelGrid out(m.shape(), 0);
  std::uint32_t next = 0;
  const int h = static_cast<int>(m.height()), w = static_cast<int>(m.width());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m(y, x) || out(y, x)) continue;
      out(y, x) = ++next;
      std::deque<Pixel> q{{y, x}};
      while (!q.empty()) {
        const Pixel p = q.front();
        q.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dy == 0 && dx == 0) || (conn == 4 && dy != 0 && dx != 0)) continue;
            const int ny = p.y + dy, nx = p.x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w || !m(ny, nx) || out(ny, nx)) continue;
            out(ny, nx) = next;
            q.push_back({ny, nx});
          }
      }
    }
  return out;
}

/// For each pixel of `region`, the instance id of the Euclidean-nearest
/// point (lowest id on ties), by exhaustive comparison of real distances.
inline LabelGrid nearest_point_split(const Mask& region, const PointAnnotationSet& pts) {
  LabelGrid out(region.shape(), 0);
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region[i]) continue;
    const Pixel p = region.shape().pixel(i);
    std::uint32_t best_id = 0;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : pts.points) {
      const double d = std::hypot(static_cast<double>(e.y - p.y), static_cast<double>(e.x - p.x));
      if (d < best || (d == best && e.instance_id < best_id)) {
        best = d;
        best_id = e.instance_id;
      }
    }
    out[i] = best_id;
  }
  return out;
}

/// S = W C with W the explicitly built row-normalised Hadamard power of A.
inline std::vector<double> dense_refresh(const std::vector<double>& a, std::size_t n,
                                         const std::vector<double>& c, std::size_t channels,
                                         double beta) {
  std::vector<double> wm(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      wm[i * n + j] = std::pow(a[i * n + j], beta);
      row += wm[i * n + j];
    }
    if (row == 0.0) {
      for (std::size_t j = 0; j < n; ++j) wm[i * n + j] = i == j ? 1.0 : 0.0;
    } else {
      for (std::size_t j = 0; j < n; ++j) wm[i * n + j] /= row;
    }
  }
  std::vector<double> s(n * channels, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < channels; ++k) s[i * channels + k] += wm[i * n + j] * c[j * channels + k];
  return s;
}

/// Mean cross-entropy over all pixels via log-sum-exp.
inline double mean_cross_entropy(const ClassScoreMap& scores, const LabelGrid& targets) {
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.pixels(); ++i) {
    const auto row = scores.row(i);
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    sum += m + std::log(z) - row[targets[i]];
  }
  return sum / static_cast<double>(scores.pixels());
}

struct ExhaustiveMatch {
  std::map<std::uint32_t, std::uint32_t> gt_to_pred;  ///< matched pairs only
  std::map<std::uint32_t, double> gt_iou;             ///< every gt id, 0 when unmatched
  std::vector<std::uint32_t> unmatched_preds;
  double overall_iou = 0.0;
  MatchCounts counts;
};

/// Greedy matching restated as a search: over every injective partial
/// assignment of predictions to gt instances, take the one whose sequence of
/// per-prediction keys (IoU, then lower gt id) is lexicographically largest
/// when predictions are listed largest first. IoUs come from direct pixel
/// counting. Only feasible for a handful of instances.
inline ExhaustiveMatch exhaustive_match(const LabelGrid& pred, const LabelGrid& gt) {
  std::vector<std::uint32_t> pids, gids;
  std::map<std::uint32_t, std::size_t> parea;
  for (auto v : pred)
    if (v) ++parea[v];
  for (auto [id, a] : parea) pids.push_back(id);
  std::stable_sort(pids.begin(), pids.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return parea[a] > parea[b]; });
  {
    std::map<std::uint32_t, int> seen;
    for (auto v : gt)
      if (v) seen[v] = 1;
    for (auto [id, _] : seen) gids.push_back(id);
  }
  auto iou = [&](std::uint32_t p, std::uint32_t g) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] == p, b = gt[i] == g;
      inter += a && b;
      uni += a || b;
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  };
  std::vector<std::vector<double>> table(pids.size(), std::vector<double>(gids.size()));
  for (std::size_t p = 0; p < pids.size(); ++p)
    for (std::size_t g = 0; g < gids.size(); ++g) table[p][g] = iou(pids[p], gids[g]);

  // choice[p] = gt index or -1. Key per prediction: (iou, -gt index); none = (0, -inf).
  using Key = std::pair<double, double>;
  std::vector<int> choice(pids.size(), -1), best_choice;
  std::vector<Key> best_keys;
  bool have_best = false;
  std::vector<bool> used(gids.size(), false);
  std::function<void(std::size_t, std::vector<Key>&)> rec = [&](std::size_t p, std::vector<Key>& keys) {
    if (p == pids.size()) {
      if (!have_best || keys > best_keys) {
        have_best = true;
        best_keys = keys;
        best_choice = choice;
      }
      return;
    }
    choice[p] = -1;
    keys.push_back({0.0, -std::numeric_limits<double>::infinity()});
    rec(p + 1, keys);
    keys.pop_back();
    for (std::size_t g = 0; g < gids.size(); ++g) {
      if (used[g] || table[p][g] <= 0.0) continue;
      used[g] = true;
      choice[p] = static_cast<int>(g);
      keys.push_back({table[p][g], -static_cast<double>(g)});
      rec(p + 1, keys);
      keys.pop_back();
      used[g] = false;
      choice[p] = -1;
    }
  };
  std::vector<Key> keys;
  rec(0, keys);

  ExhaustiveMatch m;
  for (auto g : gids) m.gt_iou[g] = 0.0;
  for (std::size_t p = 0; p < pids.size(); ++p) {
    const int g = best_choice.empty() ? -1 : best_choice[p];
    if (g < 0) {
      m.unmatched_preds.push_back(pids[p]);
    } else {
      m.gt_to_pred[gids[static_cast<std::size_t>(g)]] = pids[p];
      m.gt_iou[gids[static_cast<std::size_t>(g)]] = table[p][static_cast<std::size_t>(g)];
    }
  }
  std::sort(m.unmatched_preds.begin(), m.unmatched_preds.end());
  double sum = 0.0;
  for (auto [g, v] : m.gt_iou) {
    sum += v;
    m.counts.iou50 += v > 0.5;
    m.counts.iou70 += v > 0.7;
    m.counts.iou90 += v > 0.9;
  }
  const std::size_t denom = gids.size() + m.unmatched_preds.size();
  m.overall_iou = denom ? 100.0 * sum / static_cast<double>(denom) : 100.0;
  return m;
}

}  // namespace oracle

// ------------------------------------------------------------ criteria

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

/// Random 8-connected blob grown from one seed pixel.
inline Mask random_blob(Rng& rng, int h, int w, int target) {
  Mask m(static_cast<std::size_t>(h), static_cast<std::size_t>(w), 0);
  std::vector<Pixel> members{{static_cast<int>(rng.uniform_int(0, h - 1)),
                              static_cast<int>(rng.uniform_int(0, w - 1))}};
  m.at(members[0]) = 1;
  for (int guard = 0; static_cast<int>(members.size()) < target && guard < 50 * target; ++guard) {
    const Pixel p = members[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(members.size()) - 1))];
    const int y = p.y + static_cast<int>(rng.uniform_int(-1, 1));
    const int x = p.x + static_cast<int>(rng.uniform_int(-1, 1));
    if (!m.shape().contains(y, x) || m(y, x)) continue;
    m(y, x) = 1;
    members.push_back({y, x});
  }
  return m;
}

/// Random label grid of axis-aligned rectangles, later ones painted over.
inline LabelGrid random_rects(Rng& rng, int h, int w, int n) {
  LabelGrid g(static_cast<std::size_t>(h), static_cast<std::size_t>(w), 0);
  for (int id = 1; id <= n; ++id) {
    const int y0 = static_cast<int>(rng.uniform_int(0, h - 1));
    const int x0 = static_cast<int>(rng.uniform_int(0, w - 1));
    const int y1 = std::min(h - 1, y0 + static_cast<int>(rng.uniform_int(0, h / 2)));
    const int x1 = std::min(w - 1, x0 + static_cast<int>(rng.uniform_int(0, w / 2)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) g(y, x) = static_cast<std::uint32_t>(id);
  }
  return compact_labels(g);
}

inline ClassScoreMap random_scores(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double spread) {
  ClassScoreMap m(h, w, c);
  for (auto& v : m.data()) v = rng.uniform(-spread, spread);
  return m;
}

inline LabelGrid random_targets(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  LabelGrid t(h, w, 0);
  for (auto& v : t) v = static_cast<std::uint32_t>(rng.uniform_int(0, static_cast<std::int64_t>(c) - 1));
  return t;
}

/// Smallest gap between the k-th and (k+1)-th largest per-pixel CE; OHEM is
/// only differentiable when this is well away from zero.
inline double ohem_cutoff_gap(const ClassScoreMap& s, const LabelGrid& t, double ratio) {
  auto ce = per_pixel_cross_entropy(s, t);
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(ce.size()) - 1e-9));
  if (k >= ce.size()) return std::numeric_limits<double>::infinity();
  std::sort(ce.begin(), ce.end(), std::greater<>());
  return ce[k - 1] - ce[k];
}

}  // namespace detail

/// Oracle offsets group the gt semantic map back into the gt instances.
inline CriterionResult check_oracle_round_trip(int n_scenes = 50) {
  detail::Stopwatch sw;
  CriterionResult r{1, "oracle round-trip", true, "", 0.0};
  double worst = 100.0;
  for (int s = 1; s <= n_scenes; ++s) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(s), 0x0a11));
    const int n = static_cast<int>(rng.uniform_int(2, 6));
    const Scene sc = generate_scene(static_cast<std::uint64_t>(s), 64, 64, n, 3, ShapeKind::Mixed);
    const auto offsets = compute_offset_field(sc.gt_instances, sc.points);
    const auto grouped = group_instances(offsets, sc.gt_semantic, sc.points, GroupingConfig{});
    const auto pseudo = finalize_pseudo_labels(grouped, sc.gt_semantic, sc.points);
    ClassTable gt_cls;
    for (std::uint32_t id = 1; id < sc.instance_classes.size(); ++id) gt_cls[id] = sc.instance_classes[id];
    const auto m = greedy_match(pseudo.instances, pseudo.classes, sc.gt_instances, gt_cls);
    worst = std::min(worst, m.overall_iou);
    if (m.overall_iou != 100.0 || pseudo.instances != sc.gt_instances || pseudo.classes != gt_cls)
      r.passed = false;
  }
  r.seconds = sw.seconds();
  r.passed = r.passed && r.seconds < 10.0;
  r.detail = std::to_string(n_scenes) + " scenes, min overall_iou " + detail::fmt(worst) + ", " +
             detail::fmt(r.seconds, 3) + " s (limit 10 s)";
  return r;
}

/// Region splitting against per-pixel brute force.
inline CriterionResult check_nearest_point_split(int n_regions = 200) {
  detail::Stopwatch sw;
  CriterionResult r{2, "nearest-point split", true, "", 0.0};
  Rng rng(0x5e11);
  int mismatched = 0;
  for (int t = 0; t < n_regions; ++t) {
    const int h = static_cast<int>(rng.uniform_int(2, 12)), w = static_cast<int>(rng.uniform_int(2, 12));
    const int k = static_cast<int>(rng.uniform_int(2, 4));
    Mask blob;
    std::vector<Pixel> px;
    do {
      blob = detail::random_blob(rng, h, w, static_cast<int>(rng.uniform_int(k, h * w)));
      px.clear();
      for (std::size_t i = 0; i < blob.size(); ++i)
        if (blob[i]) px.push_back(blob.shape().pixel(i));
    } while (static_cast<int>(px.size()) < k);
    // k distinct pixels of the blob, ids shuffled.
    for (int a = 0; a < k; ++a)
      std::swap(px[static_cast<std::size_t>(a)],
                px[static_cast<std::size_t>(rng.uniform_int(a, static_cast<std::int64_t>(px.size()) - 1))]);
    std::vector<std::uint32_t> ids(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) ids[static_cast<std::size_t>(a)] = static_cast<std::uint32_t>(a + 1);
    for (int a = k - 1; a > 0; --a) std::swap(ids[static_cast<std::size_t>(a)], ids[static_cast<std::size_t>(rng.uniform_int(0, a))]);
    PointAnnotationSet pts;
    for (int a = 0; a < k; ++a)
      pts.points.push_back({px[static_cast<std::size_t>(a)].y, px[static_cast<std::size_t>(a)].x, 1, ids[static_cast<std::size_t>(a)]});

    LabelGrid semantic(blob.shape(), 0);
    for (std::size_t i = 0; i < blob.size(); ++i) semantic[i] = blob[i];
    const auto regions = extract_regions(semantic);
    const auto got = assign_points(regions, pts, semantic.shape());
    if (regions.size() != 1 || got != oracle::nearest_point_split(blob, pts)) ++mismatched;
  }
  r.seconds = sw.seconds();
  r.passed = mismatched == 0;
  r.detail = std::to_string(n_regions) + " regions, " + std::to_string(mismatched) + " mismatches";
  return r;
}

/// Central-difference checks of every analytic gradient.
inline CriterionResult check_gradients(int n_instances = 100) {
  detail::Stopwatch sw;
  constexpr double kTol = 1e-4;
  CriterionResult r{3, "gradient checks", true, "", 0.0};
  double worst[5] = {0, 0, 0, 0, 0};
  const char* names[5] = {"offset", "seg@1.0", "seg@0.2", "affinity", "objective"};
  auto note = [&](int k, const GradCheckReport& g) {
    worst[k] = std::max(worst[k], g.max_rel_error);
    if (!g.passed) r.passed = false;
  };

  for (int t = 0; t < n_instances; ++t) {
    Rng rng(derive_seed(0x97ad, static_cast<std::uint64_t>(t)));

    {  // offset loss on an 8x8 field, residuals kept off the smooth-L1 kink
      const GridShape shape{8, 8};
      OffsetField target(shape);
      std::vector<double> x0(2 * shape.size());
      std::vector<double> weights(shape.size());
      for (std::size_t i = 0; i < shape.size(); ++i) {
        weights[i] = rng.uniform(0.5, 2.0);
        if (rng.bernoulli(0.7)) target.set(i, rng.uniform(-5, 5), rng.uniform(-5, 5));
        if (target.valid_count() == 0 && i + 1 == shape.size()) target.set(i, 1.0, 1.0);
        for (int k = 0; k < 2; ++k) {
          double res;
          do res = rng.uniform(-3, 3);
          while (std::abs(std::abs(res) - 1.0) < 0.05);
          x0[2 * i + k] = (k == 0 ? target.dy(i) : target.dx(i)) + res;
        }
      }
      auto f = [&](std::span<const double> x) {
        OffsetField pred(shape);
        for (std::size_t i = 0; i < shape.size(); ++i) pred.set(i, x[2 * i], x[2 * i + 1]);
        auto l = offset_loss(pred, target, weights);
        return std::pair{l.value, l.grad};
      };
      note(0, grad_check(f, x0, 1e-3, kTol));
    }

    for (int which = 0; which < 2; ++which) {  // OHEM at ratio 1 and 0.2
      const double ratio = which == 0 ? 1.0 : 0.2;
      ClassScoreMap s;
      LabelGrid tg;
      do {
        s = detail::random_scores(rng, 6, 6, 4, 3.0);
        tg = detail::random_targets(rng, 6, 6, 4);
      } while (detail::ohem_cutoff_gap(s, tg, ratio) < 1e-3);
      std::vector<double> x0(s.data().begin(), s.data().end());
      auto f = [&](std::span<const double> x) {
        ClassScoreMap m(6, 6, 4, std::vector<double>(x.begin(), x.end()));
        auto l = seg_loss_ohem(m, tg, ratio);
        return std::pair{l.value, l.grad};
      };
      note(1 + which, grad_check(f, x0, 1e-5, kTol));
    }

    {  // affinity loss on random pairs
      AffinitySampleSet set;
      const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 40));
      for (std::size_t k = 0; k < n; ++k) {
        set.pairs.push_back({static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k + 1)});
        set.targets.push_back(rng.bernoulli(0.5) ? 1 : 0);
      }
      std::vector<double> x0(n);
      for (auto& v : x0) v = rng.uniform(-4, 4);
      auto f = [&](std::span<const double> x) {
        AffinitySampleSet s = set;
        s.pred_logits.assign(x.begin(), x.end());
        auto l = affinity_loss(s);
        return std::pair{l.value, l.grad};
      };
      note(3, grad_check(f, x0, 1e-5, kTol));
    }
  }

  // Full objective on small generated scenes (fewer instances: each check
  // costs two objective evaluations per parameter).
  const int n_obj = n_instances;
  for (int t = 0; t < n_obj; ++t) {
    const auto seed = static_cast<std::uint64_t>(1000 + t);
    Rng rng(derive_seed(seed, 0x0b1));
    SceneOptions so;
    so.min_side = 2;
    so.max_side = 3;
    const Scene sc = generate_scene(seed, 8, 8, static_cast<int>(rng.uniform_int(1, 2)), 2, ShapeKind::Rect, so);
    CorruptionConfig cc;
    cc.flip_rate = 0.1;
    cc.rng_seed = seed;
    MdmConfig cfg;
    cfg.seed = seed;
    cfg.i2s.max_pairs = 64;
    const auto targets = make_stage_targets(corrupt_semantic(sc, cc), sc.points, cfg, seed);
    const auto expanded = expand_features(sc.features);
    auto params = init_predictor(sc.features.channels(), sc.n_classes, cfg.embed_dim, seed, 4.0);
    // Keep away from the OHEM cutoff and the smooth-L1 kink.
    auto well_posed = [&](const TinyPredictorParams& p) {
      const auto o = predict_expanded(p, expanded);
      if (detail::ohem_cutoff_gap(o.class_map, targets.classes, cfg.loss_weights.hard_pixel_ratio) < 1e-3)
        return false;
      for (std::size_t i = 0; i < expanded.pixels(); ++i) {
        if (!targets.offsets.valid(i)) continue;
        const double ry = o.offsets.dy(i) - targets.offsets.dy(i);
        const double rx = o.offsets.dx(i) - targets.offsets.dx(i);
        if (std::abs(std::abs(ry) - 1.0) < 1e-2 || std::abs(std::abs(rx) - 1.0) < 1e-2) return false;
      }
      return true;
    };
    for (std::uint64_t k = 1; !well_posed(params); ++k)
      params = init_predictor(sc.features.channels(), sc.n_classes, cfg.embed_dim, derive_seed(seed, k), 4.0);
    auto f = [&](std::span<const double> x) {
      TinyPredictorParams p = params;
      p.assign(x);
      auto o = objective(p, expanded, targets, cfg.loss_weights);
      return std::pair{o.report.total, o.grad};
    };
    note(4, grad_check(f, params.flatten(), 1e-5, kTol));
  }

  r.seconds = sw.seconds();
  r.passed = r.passed && r.seconds < 30.0;
  std::string d = std::to_string(n_instances) + " instances each, worst rel err";
  for (int k = 0; k < 5; ++k) d += std::string(k ? "," : "") + " " + names[k] + " " + detail::fmt(worst[k], 3);
  r.detail = d + " (tol 1e-4), " + detail::fmt(r.seconds, 3) + " s (limit 30 s)";
  return r;
}

/// Identity and gt-affinity refresh against the explicit matrix product.
inline CriterionResult check_i2s_operator(int n_scenes = 50) {
  detail::Stopwatch sw;
  constexpr double kTol = 1e-6;
  CriterionResult r{4, "I2S operator", true, "", 0.0};
  double max_err = 0.0;
  int argmax_fail = 0, constancy_fail = 0;
  for (int s = 1; s <= n_scenes; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    Rng rng(derive_seed(seed, 0x125));
    const Scene sc = generate_scene(seed, 16, 16, static_cast<int>(rng.uniform_int(2, 4)), 3, ShapeKind::Mixed);
    const std::size_t n = sc.gt_instances.size(), c = sc.n_classes + 1;
    const ClassScoreMap cm = softmax_rows(detail::random_scores(rng, 16, 16, c, 2.0));
    const std::vector<double> cvec(cm.data().begin(), cm.data().end());
    I2SConfig cfg;
    cfg.beta = s % 2 ? 2.0 : rng.uniform(1.0, 4.0);

    DenseAffinity ident{n, std::vector<double>(n * n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) ident.values[i * n + i] = 1.0;
    const auto si = refresh_semantic(ident, cm, cfg);
    const auto oi = oracle::dense_refresh(ident.values, n, cvec, c, cfg.beta);
    if (argmax_classes(si) != argmax_classes(cm)) ++argmax_fail;
    for (std::size_t k = 0; k < oi.size(); ++k) max_err = std::max(max_err, std::abs(si.data()[k] - oi[k]));

    const auto gt = dense_affinity_from_instances(sc.gt_instances);
    const auto sg = refresh_semantic(gt, cm, cfg);
    const auto sw_ = refresh_semantic_windowed(instance_affinity(sc.gt_instances), cm, cfg);
    const auto og = oracle::dense_refresh(gt.values, n, cvec, c, cfg.beta);
    for (std::size_t k = 0; k < og.size(); ++k) {
      max_err = std::max(max_err, std::abs(sg.data()[k] - og[k]));
      max_err = std::max(max_err, std::abs(sw_.data()[k] - og[k]));
    }
    const auto am = argmax_classes(sg);
    std::map<std::uint32_t, std::uint32_t> cls;
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = sc.gt_instances[i];
      if (!id) continue;
      auto [it, fresh] = cls.emplace(id, am[i]);
      if (!fresh && it->second != am[i]) {
        ++constancy_fail;
        break;
      }
    }
  }
  r.seconds = sw.seconds();
  r.passed = max_err <= kTol && argmax_fail == 0 && constancy_fail == 0;
  r.detail = std::to_string(n_scenes) + " scenes, max |S - oracle| " + detail::fmt(max_err, 3) +
             " (tol 1e-6), argmax changes " + std::to_string(argmax_fail) +
             ", non-constant instances " + std::to_string(constancy_fail);
  return r;
}

/// OHEM at ratio 1 is plain mean CE; default weights on unit parts give 2.01.
inline CriterionResult check_loss_algebra(int n_maps = 100) {
  detail::Stopwatch sw;
  CriterionResult r{5, "loss algebra", true, "", 0.0};
  Rng rng(0xa19);
  double max_err = 0.0;
  for (int t = 0; t < n_maps; ++t) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const auto c = static_cast<std::size_t>(rng.uniform_int(2, 6));
    const auto s = detail::random_scores(rng, h, w, c, 6.0);
    const auto tg = detail::random_targets(rng, h, w, c);
    max_err = std::max(max_err, std::abs(seg_loss_ohem(s, tg, 1.0).value - oracle::mean_cross_entropy(s, tg)));
  }
  const LossWeights defaults;
  const double total = total_loss(1.0, 1.0, 1.0, defaults).total;
  r.seconds = sw.seconds();
  r.passed = max_err <= 1e-6 && std::abs(total - 2.01) <= 1e-9 && defaults.lambda_seg == 1.0 &&
             defaults.lambda_off == 0.01 && defaults.lambda_aff == 1.0;
  r.detail = "max |ohem(1) - mean CE| " + detail::fmt(max_err, 3) + " (tol 1e-6), total(1,1,1) " +
             detail::fmt(total, 12) + " (want 2.01 +- 1e-9)";
  return r;
}

/// Greedy matching against exhaustive search, plus the hand-computed AP cases.
inline CriterionResult check_evaluator(int n_trials = 1000) {
  detail::Stopwatch sw;
  CriterionResult r{6, "evaluator oracle", true, "", 0.0};
  Rng rng(0xe7a1);
  int mismatched = 0;
  for (int t = 0; t < n_trials; ++t) {
    const int h = static_cast<int>(rng.uniform_int(4, 10)), w = static_cast<int>(rng.uniform_int(4, 10));
    const auto pred = detail::random_rects(rng, h, w, static_cast<int>(rng.uniform_int(0, 5)));
    const auto gt = detail::random_rects(rng, h, w, static_cast<int>(rng.uniform_int(0, 5)));
    const auto got = greedy_match(pred, {}, gt, {});
    const auto want = oracle::exhaustive_match(pred, gt);
    bool same = std::abs(got.overall_iou - want.overall_iou) <= 1e-9 &&
                got.unmatched_preds == want.unmatched_preds && got.counts.iou50 == want.counts.iou50 &&
                got.counts.iou70 == want.counts.iou70 && got.counts.iou90 == want.counts.iou90 &&
                got.per_gt.size() == want.gt_iou.size();
    for (const auto& g : got.per_gt) {
      if (!same) break;
      const auto it = want.gt_to_pred.find(g.gt_id);
      const bool want_matched = it != want.gt_to_pred.end();
      same = want_matched == g.matched_pred.has_value() && (!want_matched || *g.matched_pred == it->second) &&
             std::abs(g.iou - want.gt_iou.at(g.gt_id)) <= 1e-12;
    }
    if (!same) ++mismatched;
  }

  // AP hand cases on a 4x4 grid.
  LabelGrid gt(4, 4, 0);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) gt(y, x) = 1;
  const ClassTable cls{{1, 1}};
  const double ap_exact = average_precision(gt, cls, {{1, 1.0}}, gt, cls, 0.5).mean_ap;
  LabelGrid far(4, 4, 0);
  far(3, 3) = 1;
  const double ap_miss = average_precision(far, cls, {{1, 1.0}}, gt, cls, 0.5).mean_ap;
  LabelGrid two = gt;
  two(3, 3) = 2;
  const ClassTable cls2{{1, 1}, {2, 1}};
  const double ap_tp_fp = average_precision(two, cls2, {{1, 0.9}, {2, 0.4}}, gt, cls, 0.5).mean_ap;
  const bool ap_ok = ap_exact == 1.0 && ap_miss == 0.0 && ap_tp_fp == 1.0;

  r.seconds = sw.seconds();
  r.passed = mismatched == 0 && ap_ok;
  r.detail = std::to_string(n_trials) + " trials, " + std::to_string(mismatched) +
             " mismatches; AP cases " + detail::fmt(ap_exact) + " " + detail::fmt(ap_miss) + " " +
             detail::fmt(ap_tp_fp) + " (want 1 0 1)";
  return r;
}

struct TrendRun {
  std::uint64_t seed = 0;
  double stage0 = 0.0;
  double final_stage = 0.0;
};

/// Stage-0 vs final-stage overall IoU on the default benchmark.
inline CriterionResult check_trend(int n_runs = 20, std::vector<TrendRun>* runs = nullptr) {
  detail::Stopwatch sw;
  CriterionResult r{7, "MDM trend", true, "", 0.0};
  int improved = 0;
  double gain = 0.0;
  for (int s = 1; s <= n_runs; ++s) {
    const auto b = benchmark_case(static_cast<std::uint64_t>(s));
    const auto run = run_mdm(b.scene, b.corrupted, b.config);
    const TrendRun tr{static_cast<std::uint64_t>(s), run.stages.front().match.overall_iou,
                      run.stages.back().match.overall_iou};
    improved += tr.final_stage >= tr.stage0;
    gain += tr.final_stage - tr.stage0;
    if (runs) runs->push_back(tr);
  }
  r.seconds = sw.seconds();
  const double frac = static_cast<double>(improved) / n_runs;
  const double mean_gain = gain / n_runs;
  r.passed = frac >= 0.9 && mean_gain >= 5.0 && r.seconds <= 300.0;
  r.detail = std::to_string(improved) + "/" + std::to_string(n_runs) + " runs improved (need >= 90%), mean gain " +
             detail::fmt(mean_gain, 4) + " points (need >= 5), " + detail::fmt(r.seconds, 4) + " s (limit 300 s)";
  return r;
}

/// Two runs of the first benchmark seed give byte-identical final pseudo labels.
inline CriterionResult check_determinism() {
  detail::Stopwatch sw;
  CriterionResult r{8, "determinism", true, "", 0.0};
  Bytes first, second;
  for (int k = 0; k < 2; ++k) {
    const auto b = benchmark_case(1);
    const auto run = run_mdm(b.scene, b.corrupted, b.config);
    (k ? second : first) = encode_label_pgm(run.stages.back().pseudo.instances);
  }
  r.seconds = sw.seconds();
  r.passed = first == second;
  r.detail = "pseudo_instances.pgm digests " + std::to_string(fnv1a64(first)) + " / " +
             std::to_string(fnv1a64(second));
  return r;
}

inline std::string format_result(const CriterionResult& r) {
  return std::string(r.passed ? "PASS" : "FAIL") + " criterion " + std::to_string(r.id) + " (" + r.name +
         "): " + r.detail;
}

}  // namespace mdm

#endif  // MDM_SELFTEST_HPP
