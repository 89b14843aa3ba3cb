#ifndef MDM_PREDICTOR_HPP
#define MDM_PREDICTOR_HPP

// Desk-scale predictor: one linear map from a fixed per-pixel feature
// expansion (the pixel's features followed by their 3x3 neighbourhood mean)
// to three heads: C+1 class scores, a 2-vector offset, and a D-dim
// embedding whose scaled dot products are pairwise affinity logits.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mdm/grid.hpp"
#include "mdm/rng.hpp"

namespace mdm {

struct TinyPredictorParams {
  std::size_t in_features = 0;  ///< F, before expansion
  std::size_t n_classes = 0;    ///< C, excluding background
  std::size_t embed_dim = 8;    ///< D
  /// Offset head output is multiplied by this fixed factor (pixels).
  double offset_scale = 8.0;
  std::uint64_t rng_seed = 0;
  std::vector<double> weights;  ///< out_dim x expanded_dim, row-major
  std::vector<double> bias;     ///< out_dim

  std::size_t expanded_dim() const { return 2 * in_features; }
  std::size_t class_dim() const { return n_classes + 1; }
  std::size_t out_dim() const { return class_dim() + 2 + embed_dim; }
  std::size_t offset_row() const { return class_dim(); }
  std::size_t embed_row() const { return class_dim() + 2; }
  std::size_t parameter_count() const { return weights.size() + bias.size(); }

  /// Weights then biases, as one flat vector.
  std::vector<double> flatten() const {
    std::vector<double> v = weights;
    v.insert(v.end(), bias.begin(), bias.end());
    return v;
  }
  void assign(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw Error("parameter vector length mismatch");
    std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(weights.size()), weights.begin());
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(weights.size()), flat.end(), bias.begin());
  }
  bool all_finite() const {
    for (double v : weights)
      if (!std::isfinite(v)) return false;
    for (double v : bias)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const TinyPredictorParams&, const TinyPredictorParams&) = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
inline TinyPredictorParams init_predictor(std::size_t in_features, std::size_t n_classes,
                                          std::size_t embed_dim, std::uint64_t seed,
                                          double offset_scale = 8.0) {
  if (in_features == 0 || n_classes == 0 || embed_dim == 0)
    throw Error("predictor dimensions must be positive");
  TinyPredictorParams p;
  p.in_features = in_features;
  p.n_classes = n_classes;
  p.embed_dim = embed_dim;
  p.offset_scale = offset_scale;
  p.rng_seed = seed;
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.expanded_dim()));
  Rng rng(derive_seed(seed, 0x1417));
  p.weights.resize(p.out_dim() * p.expanded_dim());
  p.bias.resize(p.out_dim());
  for (auto& w : p.weights) w = rng.uniform(-bound, bound);
  for (auto& b : p.bias) b = rng.uniform(-bound, bound);
  return p;
}

/// [features, 3x3 mean of features]; the mean is over in-grid neighbours.
inline FeatureMap expand_features(const FeatureMap& f) {
  const std::size_t F = f.channels();
  const int h = static_cast<int>(f.height()), w = static_cast<int>(f.width());
  FeatureMap out(f.height(), f.width(), 2 * F);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto dst = out.row(f.shape().index(y, x));
      const auto src = f.row(f.shape().index(y, x));
      for (std::size_t c = 0; c < F; ++c) dst[c] = src[c];
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!f.shape().contains(y + dy, x + dx)) continue;
          ++n;
          const auto nb = f.row(f.shape().index(y + dy, x + dx));
          for (std::size_t c = 0; c < F; ++c) dst[F + c] += nb[c];
        }
      for (std::size_t c = 0; c < F; ++c) dst[F + c] /= n;
    }
  return out;
}

struct PredictorOutputs {
  ClassScoreMap class_map;
  OffsetField offsets;  ///< valid everywhere
  EmbeddingMap embeddings;
};

/// Raw linear outputs, out_dim per pixel.
inline std::vector<double> linear_outputs(const TinyPredictorParams& p, const FeatureMap& expanded) {
  if (expanded.channels() != p.expanded_dim()) throw Error("feature dims do not match predictor");
  const std::size_t n = expanded.pixels(), in = p.expanded_dim(), out = p.out_dim();
  std::vector<double> z(n * out);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = expanded.row(i);
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = p.weights.data() + o * in;
      double s = p.bias[o];
      for (std::size_t k = 0; k < in; ++k) s += wr[k] * x[k];
      z[i * out + o] = s;
    }
  }
  return z;
}

inline PredictorOutputs outputs_from_linear(const TinyPredictorParams& p, GridShape shape,
                                            std::span<const double> z) {
  const std::size_t n = shape.size(), out = p.out_dim(), C1 = p.class_dim(), D = p.embed_dim;
  PredictorOutputs o{ClassScoreMap(shape.height, shape.width, C1), OffsetField(shape),
                     EmbeddingMap(shape.height, shape.width, D)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * out;
    auto cls = o.class_map.row(i);
    for (std::size_t c = 0; c < C1; ++c) cls[c] = zi[c];
    o.offsets.set(i, p.offset_scale * zi[p.offset_row()], p.offset_scale * zi[p.offset_row() + 1]);
    auto e = o.embeddings.row(i);
    for (std::size_t d = 0; d < D; ++d) e[d] = zi[p.embed_row() + d];
  }
  return o;
}

inline PredictorOutputs predict_expanded(const TinyPredictorParams& p, const FeatureMap& expanded) {
  const auto z = linear_outputs(p, expanded);
  return outputs_from_linear(p, expanded.shape(), z);
}

inline PredictorOutputs predict(const TinyPredictorParams& p, const FeatureMap& features) {
  if (features.channels() != p.in_features) throw Error("feature dims do not match predictor");
  return predict_expanded(p, expand_features(features));
}

/// dot(e_i, e_j) / sqrt(D)
inline double affinity_logit(const EmbeddingMap& e, std::size_t i, std::size_t j) {
  const auto a = e.row(i), b = e.row(j);
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) s += a[d] * b[d];
  return s / std::sqrt(static_cast<double>(a.size()));
}

/// Parameter gradient (flattened like TinyPredictorParams::flatten) given the
/// gradient with respect to the raw linear outputs.
inline std::vector<double> linear_backward(const TinyPredictorParams& p, const FeatureMap& expanded,
                                           std::span<const double> grad_z) {
  const std::size_t n = expanded.pixels(), in = p.expanded_dim(), out = p.out_dim();
  std::vector<double> g(p.parameter_count(), 0.0);
  double* gw = g.data();
  double* gb = g.data() + out * in;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = expanded.row(i);
    const double* gz = grad_z.data() + i * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double go = gz[o];
      if (go == 0.0) continue;
      double* gwr = gw + o * in;
      for (std::size_t k = 0; k < in; ++k) gwr[k] += go * x[k];
      gb[o] += go;
    }
  }
  return g;
}

}  // namespace mdm

#endif  // MDM_PREDICTOR_HPP
