#ifndef MDM_LOSSES_HPP
#define MDM_LOSSES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdm/grid.hpp"
#include "mdm/i2s.hpp"

namespace mdm {

enum class OffsetWeightMode { Uniform, InverseInstanceSize };

inline OffsetWeightMode offset_weight_mode_from_string(const std::string& s) {
  if (s == "uniform") return OffsetWeightMode::Uniform;
  if (s == "inverse_instance_size") return OffsetWeightMode::InverseInstanceSize;
  throw Error("unknown offset weight mode '" + s + "'");
}
inline const char* to_string(OffsetWeightMode m) {
  return m == OffsetWeightMode::Uniform ? "uniform" : "inverse_instance_size";
}

struct LossWeights {
  double lambda_seg = 1.0;
  double lambda_off = 0.01;
  double lambda_aff = 1.0;
  double hard_pixel_ratio = 0.2;
  OffsetWeightMode offset_pixel_weight_mode = OffsetWeightMode::Uniform;

  void validate() const {
    if (lambda_seg < 0 || lambda_off < 0 || lambda_aff < 0)
      throw Error("loss weights must be >= 0");
    if (!(hard_pixel_ratio > 0.0 && hard_pixel_ratio <= 1.0))
      throw Error("hard_pixel_ratio must lie in (0, 1]");
  }
};

struct LossReport {
  double seg = 0.0;
  double off = 0.0;
  double aff = 0.0;
  double total = 0.0;
  std::size_t n_seg_pixels = 0;
  std::size_t n_off_pixels = 0;
  std::size_t n_pos_pairs = 0;
  std::size_t n_neg_pairs = 0;
};

// ------------------------------------------------------------ smooth L1

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0 ? 1.0 : -1.0;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ------------------------------------------------------------ offset loss

struct OffsetLoss {
  double value = 0.0;
  std::vector<double> grad;  ///< 2 per pixel, (dy, dx), zero off the pseudo set
  std::size_t n_pixels = 0;
};

/// Weighted smooth-L1 over both components, averaged over target-valid
/// pixels.
inline OffsetLoss offset_loss(const OffsetField& pred, const OffsetField& target,
                              std::span<const double> weights) {
  require_same_shape(pred.shape(), target.shape(), "offset prediction vs target");
  const std::size_t n = target.shape().size();
  if (weights.size() != n) throw Error("offset weights must have one entry per pixel");
  const std::size_t m = target.valid_count();
  if (m == 0) throw Error("empty pseudo set");

  OffsetLoss out;
  out.grad.assign(2 * n, 0.0);
  out.n_pixels = m;
  const double inv = 1.0 / static_cast<double>(m);
  const auto pv = pred.vectors();
  const auto tv = target.vectors();
  for (std::size_t i = 0; i < n; ++i) {
    if (!target.valid(i)) continue;
    for (int k = 0; k < 2; ++k) {
      const double r = pv[2 * i + k] - tv[2 * i + k];
      out.value += weights[i] * smooth_l1(r);
      out.grad[2 * i + k] = weights[i] * smooth_l1_grad(r) * inv;
    }
  }
  out.value *= inv;
  return out;
}

/// Per-pixel W for the offset loss. Inverse-size weights are scaled so they
/// average to 1 over the pseudo set.
inline std::vector<double> offset_pixel_weights(const LabelGrid& instances, OffsetWeightMode mode) {
  std::vector<double> w(instances.size(), 1.0);
  if (mode == OffsetWeightMode::Uniform) return w;
  std::vector<std::size_t> size(max_label(instances) + 1, 0);
  for (auto v : instances) ++size[v];
  std::size_t n_inst = 0, n_pix = 0;
  for (std::size_t k = 1; k < size.size(); ++k)
    if (size[k] > 0) {
      ++n_inst;
      n_pix += size[k];
    }
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto id = instances[i];
    if (id == 0) continue;
    w[i] = static_cast<double>(n_pix) / (static_cast<double>(n_inst) * static_cast<double>(size[id]));
  }
  return w;
}

// ------------------------------------------------------------ segmentation

struct SegLoss {
  double value = 0.0;
  std::vector<double> grad;  ///< same layout as the score map
  std::size_t n_selected = 0;
  std::size_t n_labeled = 0;
};

/// Per-pixel cross-entropy of the softmax of each score row.
inline std::vector<double> per_pixel_cross_entropy(const ClassScoreMap& scores,
                                                   const LabelGrid& targets) {
  std::vector<double> ce(scores.pixels());
  for (std::size_t i = 0; i < scores.pixels(); ++i) {
    const auto row = scores.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double p = std::exp(row[targets[i]] - m) / z;
    ce[i] = -std::log(std::max(p, 1e-12));
  }
  return ce;
}

/// Cross-entropy with online hard example mining: only the ceil(ratio * N)
/// pixels with the largest loss (raster order on ties) are averaged.
inline SegLoss seg_loss_ohem(const ClassScoreMap& scores, const LabelGrid& targets, double ratio) {
  require_same_shape(scores.shape(), targets.shape(), "scores vs class targets");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("hard_pixel_ratio must lie in (0, 1]");
  const std::size_t n = scores.pixels();
  if (n == 0) throw Error("empty seg set");
  const std::size_t c = scores.channels();
  for (auto t : targets)
    if (t >= c) throw Error("class target " + std::to_string(t) + " exceeds channel count");

  const auto ce = per_pixel_cross_entropy(scores, targets);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto k = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9)));
  const auto harder = [&ce](std::size_t a, std::size_t b) {
    return ce[a] > ce[b] || (ce[a] == ce[b] && a < b);
  };
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), harder);
  order.resize(k);
  std::sort(order.begin(), order.end());

  SegLoss out;
  out.grad.assign(n * c, 0.0);
  out.n_selected = k;
  out.n_labeled = n;
  const double inv = 1.0 / static_cast<double>(k);
  for (auto i : order) {
    out.value += ce[i];
    const auto row = scores.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double p = std::exp(row[ch] - m) / z;
      out.grad[i * c + ch] = (p - (ch == targets[i] ? 1.0 : 0.0)) * inv;
    }
  }
  out.value *= inv;
  return out;
}

// ------------------------------------------------------------ affinity

struct AffinityLoss {
  double value = 0.0;
  std::vector<double> grad;  ///< d loss / d pred_logit per pair
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// Pairwise affinity loss with the binary target passed through the sigmoid
/// as well, so the target side contributes the constants
/// 1 - sigmoid(1) per positive set and sigmoid(0) per negative set.
inline AffinityLoss affinity_loss(const AffinitySampleSet& samples) {
  if (samples.pairs.empty()) throw Error("empty affinity sample set");
  if (samples.pred_logits.size() != samples.pairs.size() ||
      samples.targets.size() != samples.pairs.size())
    throw Error("affinity samples: pairs, targets and logits differ in length");

  AffinityLoss out;
  out.n_pos = samples.n_pos();
  out.n_neg = samples.n_neg();
  out.grad.assign(samples.size(), 0.0);
  double pos = 0.0, neg = 0.0;
  for (std::size_t t = 0; t < samples.size(); ++t) {
    const double a = samples.targets[t];
    const double s = sigmoid(samples.pred_logits[t]);
    const double ds = s * (1.0 - s);
    if (samples.targets[t]) {
      pos += 2.0 - sigmoid(a) - s;
      out.grad[t] = -ds / static_cast<double>(out.n_pos);
    } else {
      neg += sigmoid(a) + s;
      out.grad[t] = ds / static_cast<double>(out.n_neg);
    }
  }
  if (out.n_pos) out.value += pos / static_cast<double>(out.n_pos);
  if (out.n_neg) out.value += neg / static_cast<double>(out.n_neg);
  return out;
}

/// Infimum of affinity_loss as logits saturate: the target-side constants.
inline double affinity_loss_floor(std::size_t n_pos, std::size_t n_neg) {
  return (n_pos ? 1.0 - sigmoid(1.0) : 0.0) + (n_neg ? sigmoid(0.0) : 0.0);
}

// ------------------------------------------------------------ total

inline LossReport total_loss(double seg, double off, double aff, const LossWeights& w) {
  if (!std::isfinite(seg) || !std::isfinite(off) || !std::isfinite(aff))
    throw Error("loss components must be finite");
  LossReport r;
  r.seg = seg;
  r.off = off;
  r.aff = aff;
  r.total = w.lambda_seg * seg + w.lambda_off * off + w.lambda_aff * aff;
  return r;
}

// ------------------------------------------------------------ gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;  ///< max |analytic - numeric| / max |numeric|
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

/// Compares the analytic gradient returned by `f` at x0 with central
/// differences of step h. `f` maps a parameter vector to (value, gradient).
inline GradCheckReport grad_check(
    const std::function<std::pair<double, std::vector<double>>(std::span<const double>)>& f,
    std::vector<double> x0, double h, double tol) {
  const auto analytic = f(x0).second;
  if (analytic.size() != x0.size()) throw Error("grad_check: gradient length mismatch");
  std::vector<double> numeric(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double keep = x0[i];
    x0[i] = keep + h;
    const double up = f(x0).first;
    x0[i] = keep - h;
    const double down = f(x0).first;
    x0[i] = keep;
    numeric[i] = (up - down) / (2.0 * h);
  }
  GradCheckReport r;
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double e = std::abs(analytic[i] - numeric[i]);
    if (e > r.max_abs_error) {
      r.max_abs_error = e;
      r.worst_index = i;
    }
  }
  r.max_rel_error = scale > 0.0 ? r.max_abs_error / scale : r.max_abs_error;
  r.passed = r.max_rel_error <= tol;
  return r;
}

}  // namespace mdm

#endif  // MDM_LOSSES_HPP
