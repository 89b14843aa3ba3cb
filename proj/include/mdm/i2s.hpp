#ifndef MDM_I2S_HPP
#define MDM_I2S_HPP

// Instance-to-semantic branch: pixel-pair affinity targets from an instance
// map, and the class-map refresh S = normalise_rows(A^beta) * C.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mdm/grid.hpp"
#include "mdm/rng.hpp"

namespace mdm {

struct I2SConfig {
  double beta = 2.0;
  int pair_radius = 8;
  std::size_t max_pairs = 4096;
  bool balance = true;

  void validate() const {
    if (!(beta >= 1.0)) throw Error("beta must be >= 1");
    if (pair_radius < 1) throw Error("pair_radius must be >= 1");
    if (max_pairs < 2) throw Error("max_pairs must be >= 2");
  }
};

struct PixelPair {
  std::uint32_t i = 0;  ///< linear index
  std::uint32_t j = 0;
  friend bool operator==(const PixelPair&, const PixelPair&) = default;
};

struct AffinitySampleSet {
  GridShape shape;
  std::vector<PixelPair> pairs;
  std::vector<std::uint8_t> targets;  ///< 1 = same instance
  std::vector<double> pred_logits;
  int radius = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return pairs.size(); }
  std::size_t n_pos() const {
    return static_cast<std::size_t>(std::count(targets.begin(), targets.end(), 1));
  }
  std::size_t n_neg() const { return targets.size() - n_pos(); }
};

/// Samples pixel pairs within Chebyshev distance `pair_radius`. Pairs of two
/// background pixels are never eligible. With balance on, positives and
/// negatives differ in count by at most one unless one kind runs out.
inline AffinitySampleSet build_affinity_targets(const LabelGrid& instances, const I2SConfig& cfg,
                                                std::uint64_t seed) {
  cfg.validate();
  const GridShape shape = instances.shape();
  const int h = static_cast<int>(shape.height), w = static_cast<int>(shape.width);
  const int r = cfg.pair_radius;

  std::vector<PixelPair> pos, neg;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto a = instances(y, x);
      const auto i = static_cast<std::uint32_t>(shape.index(y, x));
      // Each unordered pair once: later pixels in raster order only.
      for (int dy = 0; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dy == 0 && dx <= 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (!shape.contains(ny, nx)) continue;
          const auto b = instances(ny, nx);
          if (a == 0 && b == 0) continue;
          const PixelPair pr{i, static_cast<std::uint32_t>(shape.index(ny, nx))};
          (a == b ? pos : neg).push_back(pr);
        }
    }
  if (pos.empty() && neg.empty()) throw Error("no affinity pairs");

  Rng rng(derive_seed(seed, 0xaff1));
  auto take = [&rng](std::vector<PixelPair>& pool, std::size_t k) {
    k = std::min(k, pool.size());
    for (std::size_t t = 0; t < k; ++t) {
      const auto s = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(t), static_cast<std::int64_t>(pool.size()) - 1));
      std::swap(pool[t], pool[s]);
    }
    pool.resize(k);
  };

  AffinitySampleSet set;
  set.shape = shape;
  set.radius = r;
  set.seed = seed;
  const std::size_t total = cfg.max_pairs;
  if (cfg.balance) {
    std::size_t np = std::min(pos.size(), (total + 1) / 2);
    std::size_t nn = std::min(neg.size(), total / 2);
    if (np < (total + 1) / 2) nn = std::min(neg.size(), total - np);
    if (nn < total / 2) np = std::min(pos.size(), total - nn);
    take(pos, np);
    take(neg, nn);
  } else {
    const std::size_t n = std::min(total, pos.size() + neg.size());
    std::vector<std::uint8_t> kind(pos.size(), 1);
    kind.resize(pos.size() + neg.size(), 0);
    std::vector<PixelPair> all = pos;
    all.insert(all.end(), neg.begin(), neg.end());
    std::vector<std::uint32_t> order(all.size());
    for (std::size_t t = 0; t < order.size(); ++t) order[t] = static_cast<std::uint32_t>(t);
    for (std::size_t t = 0; t < n; ++t) {
      const auto s = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(t), static_cast<std::int64_t>(order.size()) - 1));
      std::swap(order[t], order[s]);
    }
    pos.clear();
    neg.clear();
    for (std::size_t t = 0; t < n; ++t) (kind[order[t]] ? pos : neg).push_back(all[order[t]]);
  }
  for (auto p : pos) {
    set.pairs.push_back(p);
    set.targets.push_back(1);
  }
  for (auto p : neg) {
    set.pairs.push_back(p);
    set.targets.push_back(0);
  }
  set.pred_logits.assign(set.pairs.size(), 0.0);
  return set;
}

/// Row-major n x n affinity matrix.
struct DenseAffinity {
  std::size_t n = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

inline constexpr std::size_t kDenseAffinityLimit = 4096;

/// A_ij = 1 iff i and j share a nonzero instance id; diagonal forced to 1.
inline DenseAffinity dense_affinity_from_instances(const LabelGrid& instances) {
  const std::size_t n = instances.size();
  if (n > kDenseAffinityLimit) throw Error("dense affinity guard: grid exceeds 4096 pixels");
  DenseAffinity a{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      a(i, j) = (i == j || (instances[i] != 0 && instances[i] == instances[j])) ? 1.0 : 0.0;
  return a;
}

namespace detail {

inline double hadamard_power(double a, double beta) {
  if (a <= 0.0) return 0.0;
  return beta == 2.0 ? a * a : std::pow(a, beta);
}

}  // namespace detail

/// Dense refresh. Rows whose powered mass is zero copy the input row.
inline ClassScoreMap refresh_semantic(const DenseAffinity& affinity, const ClassScoreMap& class_map,
                                      const I2SConfig& cfg) {
  if (!(cfg.beta >= 1.0)) throw Error("beta must be >= 1");
  const std::size_t n = class_map.pixels();
  const std::size_t c = class_map.channels();
  if (affinity.n != n) throw Error("shape mismatch: affinity vs class map");
  if (!class_map.all_finite()) throw Error("class map has non-finite scores");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(affinity(i, j) - affinity(j, i)) > 1e-6) throw Error("affinity not symmetric");

  ClassScoreMap out(class_map.height(), class_map.width(), c);
  std::vector<double> acc(c);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    double mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double wgt = detail::hadamard_power(affinity(i, j), cfg.beta);
      if (wgt == 0.0) continue;
      mass += wgt;
      const auto src = class_map.row(j);
      for (std::size_t k = 0; k < c; ++k) acc[k] += wgt * src[k];
    }
    auto dst = out.row(i);
    if (mass == 0.0) {
      const auto src = class_map.row(i);
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      for (std::size_t k = 0; k < c; ++k) dst[k] = acc[k] / mass;
    }
  }
  return out;
}

/// Windowed refresh used in production: weights are evaluated only for
/// pixels within Chebyshev distance `cfg.pair_radius`; `affinity(i, j)`
/// returns a value in [0, 1] and is expected to be symmetric.
template <class AffinityFn>
ClassScoreMap refresh_semantic_windowed(AffinityFn&& affinity, const ClassScoreMap& class_map,
                                        const I2SConfig& cfg) {
  cfg.validate();
  if (!class_map.all_finite()) throw Error("class map has non-finite scores");
  const GridShape shape = class_map.shape();
  const std::size_t c = class_map.channels();
  const int r = cfg.pair_radius;
  ClassScoreMap out(shape.height, shape.width, c);
  std::vector<double> acc(c);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const Pixel p = shape.pixel(i);
    std::fill(acc.begin(), acc.end(), 0.0);
    double mass = 0.0;
    for (int y = p.y - r; y <= p.y + r; ++y)
      for (int x = p.x - r; x <= p.x + r; ++x) {
        if (!shape.contains(y, x)) continue;
        const std::size_t j = shape.index(y, x);
        const double wgt = detail::hadamard_power(affinity(i, j), cfg.beta);
        if (wgt == 0.0) continue;
        mass += wgt;
        const auto src = class_map.row(j);
        for (std::size_t k = 0; k < c; ++k) acc[k] += wgt * src[k];
      }
    auto dst = out.row(i);
    if (mass == 0.0) {
      const auto src = class_map.row(i);
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      for (std::size_t k = 0; k < c; ++k) dst[k] = acc[k] / mass;
    }
  }
  return out;
}

/// Binary instance affinity evaluated pairwise (background only to itself).
inline auto instance_affinity(const LabelGrid& instances) {
  return [&instances](std::size_t i, std::size_t j) {
    return (i == j || (instances[i] != 0 && instances[i] == instances[j])) ? 1.0 : 0.0;
  };
}

/// Per-pixel argmax (lowest channel on ties).
inline LabelGrid argmax_classes(const ClassScoreMap& map) {
  LabelGrid out(map.height(), map.width(), 0);
  for (std::size_t i = 0; i < map.pixels(); ++i) {
    const auto row = map.row(i);
    out[i] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Numerically stable softmax over each pixel's channels.
inline ClassScoreMap softmax_rows(const ClassScoreMap& scores) {
  ClassScoreMap out = scores;
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    auto row = out.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - m);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  return out;
}

}  // namespace mdm

#endif  // MDM_I2S_HPP
