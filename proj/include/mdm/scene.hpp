#ifndef MDM_SCENE_HPP
#define MDM_SCENE_HPP

// Synthetic scenes: ground-truth instances drawn as rectangles or ellipses,
// one annotation point per instance, an image-like feature stack, and a
// corruption model for the semantic map fed to the pipeline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mdm/components.hpp"
#include "mdm/grid.hpp"
#include "mdm/rng.hpp"

namespace mdm {

enum class ShapeKind { Rect, Ellipse, Mixed };
enum class PointMode { Centroid, RandomInterior };

inline ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "rect") return ShapeKind::Rect;
  if (s == "ellipse") return ShapeKind::Ellipse;
  if (s == "mixed") return ShapeKind::Mixed;
  throw Error("unknown shape kind '" + s + "'");
}
inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Rect: return "rect";
    case ShapeKind::Ellipse: return "ellipse";
    case ShapeKind::Mixed: return "mixed";
  }
  return "?";
}
inline PointMode point_mode_from_string(const std::string& s) {
  if (s == "centroid") return PointMode::Centroid;
  if (s == "random_interior") return PointMode::RandomInterior;
  throw Error("unknown point mode '" + s + "'");
}
inline const char* to_string(PointMode m) {
  return m == PointMode::Centroid ? "centroid" : "random_interior";
}

struct SceneOptions {
  /// Chance that a new instance copies an earlier instance's class and is
  /// placed flush against it.
  double touch_probability = 0.5;
  int min_side = 0;  ///< 0: max(4, min(H, W) / 8)
  int max_side = 0;  ///< 0: max(min_side, min(H, W) / 4)
  PointMode point_mode = PointMode::Centroid;
  double instance_jitter = 0.1;
  double pixel_noise = 0.05;
  /// Pixels per unit of the nearest-point offset feature channels.
  double offset_feature_scale = 8.0;
  int max_attempts = 200;
};

struct Scene {
  std::uint64_t seed = 0;
  std::uint32_t n_classes = 0;
  LabelGrid gt_instances;
  LabelGrid gt_semantic;
  /// Class of each gt instance id; index 0 unused.
  std::vector<std::uint32_t> instance_classes;
  PointAnnotationSet points;
  FeatureMap features;

  GridShape shape() const { return gt_instances.shape(); }
};

struct CorruptionConfig {
  int dilation_px = 0;
  int erosion_px = 0;
  bool merge_adjacent = false;
  double flip_rate = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (dilation_px < 0 || erosion_px < 0) throw Error("corruption radii must be >= 0");
    if (!(flip_rate >= 0.0 && flip_rate < 1.0)) throw Error("flip_rate must lie in [0, 1)");
  }
};

/// Feature layout: 3 colour channels and normalised (y, x), all centred on
/// zero, then the offset to the nearest annotation point scaled by
/// SceneOptions::offset_feature_scale.
inline constexpr std::size_t kSceneFeatureChannels = 7;

/// Same-class instances closer than this (Chebyshev) are bridged by
/// `corrupt_semantic` when merge_adjacent is set.
inline constexpr int kMergeGap = 4;

namespace detail {

inline std::array<double, 3> class_colour(std::uint32_t cls) {
  static constexpr std::array<std::array<double, 3>, 8> table = {{
      {0.85, 0.30, 0.30},
      {0.30, 0.85, 0.30},
      {0.30, 0.35, 0.90},
      {0.85, 0.80, 0.25},
      {0.80, 0.30, 0.85},
      {0.25, 0.80, 0.85},
      {0.95, 0.60, 0.20},
      {0.55, 0.55, 0.95},
  }};
  if (cls >= 1 && cls <= table.size()) return table[cls - 1];
  Rng rng(derive_seed(cls, 0xc0105));
  return {rng.uniform(0.35, 0.95), rng.uniform(0.35, 0.95), rng.uniform(0.35, 0.95)};
}

inline constexpr std::array<double, 3> kBackgroundColour = {0.15, 0.15, 0.15};

struct Box {
  int y0, x0, h, w;
  int y1() const { return y0 + h - 1; }
  int x1() const { return x0 + w - 1; }
};

inline bool shape_covers(const Box& b, bool ellipse, int y, int x) {
  if (y < b.y0 || y > b.y1() || x < b.x0 || x > b.x1()) return false;
  if (!ellipse) return true;
  const double cy = b.y0 + (b.h - 1) / 2.0;
  const double cx = b.x0 + (b.w - 1) / 2.0;
  const double ry = b.h / 2.0;
  const double rx = b.w / 2.0;
  const double ny = (y - cy) / ry;
  const double nx = (x - cx) / rx;
  return ny * ny + nx * nx <= 1.0;
}

inline std::size_t nearest_point(const PointAnnotationSet& pts, int y, int x) {
  std::size_t best = 0;
  long long best_d = std::numeric_limits<long long>::max();
  std::uint32_t best_id = std::numeric_limits<std::uint32_t>::max();
  for (std::size_t k = 0; k < pts.points.size(); ++k) {
    const auto& p = pts.points[k];
    const long long dy = p.y - y, dx = p.x - x;
    const long long d = dy * dy + dx * dx;
    if (d < best_d || (d == best_d && p.instance_id < best_id)) {
      best = k;
      best_d = d;
      best_id = p.instance_id;
    }
  }
  return best;
}

}  // namespace detail

/// One point per instance, always on a pixel of that instance.
inline PointAnnotationSet pick_points(const LabelGrid& gt_instances,
                                      const std::vector<std::uint32_t>& instance_classes,
                                      PointMode mode, std::uint64_t seed) {
  const std::uint32_t n = max_label(gt_instances);
  std::vector<std::vector<Pixel>> members(n + 1);
  for (std::size_t i = 0; i < gt_instances.size(); ++i)
    if (gt_instances[i] != 0) members[gt_instances[i]].push_back(gt_instances.shape().pixel(i));

  Rng rng(derive_seed(seed, 0x9017));
  PointAnnotationSet set;
  for (std::uint32_t id = 1; id <= n; ++id) {
    const auto& px = members[id];
    if (px.empty()) throw Error("instance " + std::to_string(id) + " is empty");
    Pixel chosen = px.front();
    if (mode == PointMode::Centroid) {
      double sy = 0, sx = 0;
      for (auto p : px) {
        sy += p.y;
        sx += p.x;
      }
      const double cy = sy / px.size(), cx = sx / px.size();
      const int ry = static_cast<int>(std::floor(cy + 0.5));
      const int rx = static_cast<int>(std::floor(cx + 0.5));
      if (gt_instances.shape().contains(ry, rx) && gt_instances(ry, rx) == id) {
        chosen = {ry, rx};
      } else {
        double best = std::numeric_limits<double>::infinity();
        for (auto p : px) {
          const double d = (p.y - cy) * (p.y - cy) + (p.x - cx) * (p.x - cx);
          if (d < best) {
            best = d;
            chosen = p;
          }
        }
      }
    } else {
      // Prefer pixels whose 4-neighbours all belong to the instance.
      std::vector<Pixel> inner;
      for (auto p : px) {
        bool interior = true;
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int y = p.y + dy[k], x = p.x + dx[k];
          if (!gt_instances.shape().contains(y, x) || gt_instances(y, x) != id) interior = false;
        }
        if (interior) inner.push_back(p);
      }
      const auto& pool = inner.empty() ? px : inner;
      chosen = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
    }
    const std::uint32_t cls = id < instance_classes.size() ? instance_classes[id] : 1;
    set.points.push_back({chosen.y, chosen.x, cls, id});
  }
  return set;
}

/// Image-like features for a scene; see kSceneFeatureChannels for the layout.
inline FeatureMap make_scene_features(const LabelGrid& gt_instances,
                                      const std::vector<std::uint32_t>& instance_classes,
                                      const PointAnnotationSet& points, std::uint64_t seed,
                                      const SceneOptions& opts = {}) {
  const std::size_t h = gt_instances.height(), w = gt_instances.width();
  const std::uint32_t n = max_label(gt_instances);
  Rng rng(derive_seed(seed, 0xfea7));

  std::vector<std::array<double, 3>> colour(n + 1, detail::kBackgroundColour);
  for (std::uint32_t id = 1; id <= n; ++id) {
    colour[id] = detail::class_colour(instance_classes.at(id));
    for (auto& c : colour[id]) c += rng.uniform(-opts.instance_jitter, opts.instance_jitter);
  }

  FeatureMap f(h, w, kSceneFeatureChannels);
  const double scale = opts.offset_feature_scale;
  for (std::size_t i = 0; i < gt_instances.size(); ++i) {
    const Pixel p = gt_instances.shape().pixel(i);
    auto row = f.row(i);
    for (int c = 0; c < 3; ++c)
      row[c] = colour[gt_instances[i]][c] + opts.pixel_noise * rng.normal() - 0.5;
    row[3] = h > 1 ? static_cast<double>(p.y) / static_cast<double>(h - 1) - 0.5 : 0.0;
    row[4] = w > 1 ? static_cast<double>(p.x) / static_cast<double>(w - 1) - 0.5 : 0.0;
    if (!points.empty()) {
      const auto& e = points.points[detail::nearest_point(points, p.y, p.x)];
      row[5] = (e.y - p.y) / scale;
      row[6] = (e.x - p.x) / scale;
    }
  }
  return f;
}

inline Scene generate_scene(std::uint64_t seed, std::size_t h, std::size_t w, int n_instances,
                            int n_classes, ShapeKind shape_kind, const SceneOptions& opts = {}) {
  if (n_instances < 1) throw Error("n_instances must be >= 1");
  if (n_classes < 1) throw Error("n_classes must be >= 1");
  if (h == 0 || w == 0) throw Error("empty raster");
  if (!(opts.offset_feature_scale > 0.0)) throw Error("offset_feature_scale must be > 0");

  const int H = static_cast<int>(h), W = static_cast<int>(w);
  const int min_side = opts.min_side > 0 ? opts.min_side : std::max(4, std::min(H, W) / 8);
  const int max_side = opts.max_side > 0 ? opts.max_side : std::max(min_side, std::min(H, W) / 4);
  if (min_side > std::min(H, W) || max_side < min_side) throw Error("placement failed");

  Rng rng(derive_seed(seed, 0x5ce2e));
  Scene s;
  s.seed = seed;
  s.n_classes = static_cast<std::uint32_t>(n_classes);
  s.gt_instances = LabelGrid(h, w, 0);
  s.instance_classes.assign(1, 0);
  std::vector<detail::Box> boxes(1, {0, 0, 0, 0});

  for (int id = 1; id <= n_instances; ++id) {
    bool placed = false;
    for (int attempt = 0; attempt < opts.max_attempts && !placed; ++attempt) {
      const bool ellipse = shape_kind == ShapeKind::Ellipse ||
                           (shape_kind == ShapeKind::Mixed && rng.bernoulli(0.5));
      detail::Box b{0, 0, static_cast<int>(rng.uniform_int(min_side, max_side)),
                    static_cast<int>(rng.uniform_int(min_side, max_side))};
      std::uint32_t cls = static_cast<std::uint32_t>(rng.uniform_int(1, n_classes));
      if (id > 1 && rng.bernoulli(opts.touch_probability)) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(1, id - 1));
        const auto& nb = boxes[j];
        cls = s.instance_classes[j];
        switch (rng.uniform_int(0, 3)) {
          case 0: b.x0 = nb.x1() + 1; b.y0 = static_cast<int>(rng.uniform_int(nb.y0 - b.h / 2, nb.y1() - b.h / 2)); break;
          case 1: b.x0 = nb.x0 - b.w; b.y0 = static_cast<int>(rng.uniform_int(nb.y0 - b.h / 2, nb.y1() - b.h / 2)); break;
          case 2: b.y0 = nb.y1() + 1; b.x0 = static_cast<int>(rng.uniform_int(nb.x0 - b.w / 2, nb.x1() - b.w / 2)); break;
          default: b.y0 = nb.y0 - b.h; b.x0 = static_cast<int>(rng.uniform_int(nb.x0 - b.w / 2, nb.x1() - b.w / 2)); break;
        }
      } else {
        if (b.h > H || b.w > W) continue;
        b.y0 = static_cast<int>(rng.uniform_int(0, H - b.h));
        b.x0 = static_cast<int>(rng.uniform_int(0, W - b.w));
      }
      if (b.y0 < 0 || b.x0 < 0 || b.y1() >= H || b.x1() >= W) continue;

      bool clash = false;
      std::size_t area = 0;
      for (int y = b.y0; y <= b.y1() && !clash; ++y)
        for (int x = b.x0; x <= b.x1(); ++x)
          if (detail::shape_covers(b, ellipse, y, x)) {
            if (s.gt_instances(y, x) != 0) {
              clash = true;
              break;
            }
            ++area;
          }
      if (clash || area < 4) continue;

      for (int y = b.y0; y <= b.y1(); ++y)
        for (int x = b.x0; x <= b.x1(); ++x)
          if (detail::shape_covers(b, ellipse, y, x))
            s.gt_instances(y, x) = static_cast<std::uint32_t>(id);
      boxes.push_back(b);
      s.instance_classes.push_back(cls);
      placed = true;
    }
    if (!placed) throw Error("placement failed");
  }

  s.gt_semantic = LabelGrid(h, w, 0);
  for (std::size_t i = 0; i < s.gt_instances.size(); ++i)
    s.gt_semantic[i] = s.instance_classes[s.gt_instances[i]];
  s.points = pick_points(s.gt_instances, s.instance_classes, opts.point_mode, seed);
  s.features = make_scene_features(s.gt_instances, s.instance_classes, s.points, seed, opts);
  return s;
}

namespace detail {

inline LabelGrid erode_classes(const LabelGrid& in) {
  LabelGrid out = in;
  const int h = static_cast<int>(in.height()), w = static_cast<int>(in.width());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto v = in(y, x);
      if (v == 0) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (in.shape().contains(ny, nx) && in(ny, nx) != v) out(y, x) = 0;
        }
    }
  return out;
}

/// Background pixels take the smallest class among their 8-neighbours.
inline LabelGrid dilate_classes(const LabelGrid& in) {
  LabelGrid out = in;
  const int h = static_cast<int>(in.height()), w = static_cast<int>(in.width());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (in(y, x) != 0) continue;
      std::uint32_t best = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (!in.shape().contains(ny, nx)) continue;
          const auto v = in(ny, nx);
          if (v != 0 && (best == 0 || v < best)) best = v;
        }
      out(y, x) = best;
    }
  return out;
}

/// Paints a 3-pixel-wide band between the closest pixels of every pair of
/// same-class instances within kMergeGap of each other.
inline void bridge_same_class(const Scene& scene, LabelGrid& map) {
  const std::uint32_t n = max_label(scene.gt_instances);
  std::vector<std::vector<Pixel>> members(n + 1);
  for (std::size_t i = 0; i < scene.gt_instances.size(); ++i)
    if (scene.gt_instances[i] != 0)
      members[scene.gt_instances[i]].push_back(scene.gt_instances.shape().pixel(i));

  for (std::uint32_t a = 1; a <= n; ++a)
    for (std::uint32_t b = a + 1; b <= n; ++b) {
      if (scene.instance_classes[a] != scene.instance_classes[b]) continue;
      long long best = std::numeric_limits<long long>::max();
      Pixel pa{}, pb{};
      int cheb = std::numeric_limits<int>::max();
      for (auto p : members[a])
        for (auto q : members[b]) {
          const long long dy = q.y - p.y, dx = q.x - p.x;
          const long long d = dy * dy + dx * dx;
          if (d < best) {
            best = d;
            pa = p;
            pb = q;
          }
          cheb = std::min(cheb, static_cast<int>(std::max(std::abs(dy), std::abs(dx))));
        }
      if (cheb > kMergeGap) continue;
      const std::uint32_t cls = scene.instance_classes[a];
      const int steps = std::max(std::abs(pb.y - pa.y), std::abs(pb.x - pa.x));
      for (int t = 0; t <= steps; ++t) {
        const double f = steps == 0 ? 0.0 : static_cast<double>(t) / steps;
        const int cy = static_cast<int>(std::lround(pa.y + f * (pb.y - pa.y)));
        const int cx = static_cast<int>(std::lround(pa.x + f * (pb.x - pa.x)));
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if (map.shape().contains(cy + dy, cx + dx) && map(cy + dy, cx + dx) == 0)
              map(cy + dy, cx + dx) = cls;
      }
    }
}

}  // namespace detail

/// Degrades gt_semantic: erosion, then dilation, then same-class bridges,
/// then random flips to a different label in 0..C.
inline LabelGrid corrupt_semantic(const Scene& scene, const CorruptionConfig& cfg) {
  cfg.validate();
  LabelGrid map = scene.gt_semantic;
  for (int i = 0; i < cfg.erosion_px; ++i) map = detail::erode_classes(map);
  for (int i = 0; i < cfg.dilation_px; ++i) map = detail::dilate_classes(map);
  if (cfg.merge_adjacent) detail::bridge_same_class(scene, map);
  if (cfg.flip_rate > 0.0) {
    Rng rng(derive_seed(cfg.rng_seed, 0xf11b));
    const auto labels = static_cast<std::int64_t>(scene.n_classes) + 1;
    for (auto& v : map) {
      if (!rng.bernoulli(cfg.flip_rate)) continue;
      auto nv = static_cast<std::uint32_t>(rng.uniform_int(0, labels - 2));
      if (nv >= v) ++nv;
      v = nv;
    }
  }
  return map;
}

}  // namespace mdm

#endif  // MDM_SCENE_HPP
