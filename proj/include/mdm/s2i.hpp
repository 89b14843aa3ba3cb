#ifndef MDM_S2I_HPP
#define MDM_S2I_HPP

// Semantic-to-instance branch: connected regions of the semantic map are
// matched to annotation points, shared regions are split by nearest point,
// offset targets point from each pixel to its annotation, and predicted
// offsets are grouped back into instances by centre voting.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mdm/codec.hpp"
#include "mdm/components.hpp"
#include "mdm/grid.hpp"

namespace mdm {

struct InstanceRegion {
  std::uint32_t region_id = 0;
  std::uint32_t class_id = 0;
  std::vector<Pixel> pixels;
  std::vector<std::uint32_t> owner_points;
};

struct GroupingConfig {
  /// Votes farther than this from every point are dropped. <= 0 selects
  /// max(H, W) / 4.
  double vote_radius_tau = 0.0;
  int pseudo_box_side = 16;
  bool require_foreground = true;

  double tau_for(GridShape shape) const {
    return vote_radius_tau > 0.0 ? vote_radius_tau
                                 : static_cast<double>(std::max(shape.height, shape.width)) / 4.0;
  }
  void validate() const {
    if (pseudo_box_side < 1) throw Error("pseudo_box_side must be >= 1");
  }
};

/// A point that was not counted as lying inside any region.
struct PointNote {
  std::uint32_t instance_id = 0;
  enum class Reason { OnBackground, ClassMismatch } reason = Reason::OnBackground;
};

/// One region per connected component per class, in raster order of first pixel.
inline std::vector<InstanceRegion> extract_regions(const LabelGrid& semantic,
                                                   Connectivity connectivity = Connectivity::Eight) {
  const LabelGrid labels = connected_regions_by_value(semantic, connectivity);
  std::vector<InstanceRegion> regions(max_label(labels));
  for (std::size_t r = 0; r < regions.size(); ++r) regions[r].region_id = static_cast<std::uint32_t>(r + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l == 0) continue;
    auto& reg = regions[l - 1];
    reg.class_id = semantic[i];
    reg.pixels.push_back(semantic.shape().pixel(i));
  }
  return regions;
}

/// Builds the stage instance map from regions and points. A region holding
/// one point takes that point's id; a region holding several is split by
/// nearest point (squared Euclidean, lowest instance id on ties); a region
/// holding none becomes background. A point counts as inside a region only
/// when its pixel belongs to the region and the classes agree.
inline LabelGrid assign_points(const std::vector<InstanceRegion>& regions,
                               const PointAnnotationSet& points, GridShape shape,
                               std::vector<PointNote>* notes = nullptr) {
  points.validate(shape);
  LabelGrid region_of(shape, 0);
  for (std::size_t r = 0; r < regions.size(); ++r)
    for (auto p : regions[r].pixels) {
      if (!shape.contains(p.y, p.x)) throw Error("region pixel outside the grid");
      region_of.at(p) = static_cast<std::uint32_t>(r + 1);
    }

  std::vector<std::vector<const AnnotationPoint*>> owners(regions.size());
  for (const auto& pt : points.points) {
    const auto r = region_of(pt.y, pt.x);
    if (r == 0) {
      if (notes) notes->push_back({pt.instance_id, PointNote::Reason::OnBackground});
      continue;
    }
    if (regions[r - 1].class_id != pt.class_id) {
      if (notes) notes->push_back({pt.instance_id, PointNote::Reason::ClassMismatch});
      continue;
    }
    owners[r - 1].push_back(&pt);
  }

  LabelGrid out(shape, 0);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& own = owners[r];
    if (own.empty()) continue;
    if (own.size() == 1) {
      for (auto p : regions[r].pixels) out.at(p) = own.front()->instance_id;
      continue;
    }
    for (auto p : regions[r].pixels) {
      const AnnotationPoint* best = nullptr;
      long long best_d = std::numeric_limits<long long>::max();
      for (const auto* e : own) {
        const long long dy = e->y - p.y, dx = e->x - p.x;
        const long long d = dy * dy + dx * dx;
        if (d < best_d || (d == best_d && e->instance_id < best->instance_id)) {
          best = e;
          best_d = d;
        }
      }
      out.at(p) = best->instance_id;
    }
  }
  return out;
}

/// Regions annotated with the points they contain (same containment rule as
/// assign_points).
inline std::vector<InstanceRegion> with_owner_points(std::vector<InstanceRegion> regions,
                                                     const PointAnnotationSet& points,
                                                     GridShape shape) {
  LabelGrid region_of(shape, 0);
  for (std::size_t r = 0; r < regions.size(); ++r)
    for (auto p : regions[r].pixels) region_of.at(p) = static_cast<std::uint32_t>(r + 1);
  for (const auto& pt : points.points) {
    const auto r = region_of(pt.y, pt.x);
    if (r != 0 && regions[r - 1].class_id == pt.class_id)
      regions[r - 1].owner_points.push_back(pt.instance_id);
  }
  return regions;
}

/// Pixel-to-point vectors: vector(m) = e_k - m for every pixel m of instance k.
inline OffsetField compute_offset_field(const LabelGrid& instances,
                                        const PointAnnotationSet& points) {
  const std::uint32_t top = max_label(instances);
  std::vector<const AnnotationPoint*> by_id(top + 1, nullptr);
  for (const auto& p : points.points)
    if (p.instance_id <= top) by_id[p.instance_id] = &p;

  OffsetField field(instances.shape());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto id = instances[i];
    if (id == 0) continue;
    const auto* e = by_id[id];
    if (!e) throw Error("instance without annotation point (id " + std::to_string(id) + ")");
    const Pixel m = instances.shape().pixel(i);
    field.set(i, static_cast<double>(e->y - m.y), static_cast<double>(e->x - m.x));
  }
  return field;
}

/// Centre voting: each eligible pixel p votes at p + offset(p) and joins the
/// nearest point within tau. Points left without pixels get a
/// side x side box centred on them, written over background only, in
/// instance-id order.
inline LabelGrid group_instances(const OffsetField& pred_offsets, const LabelGrid& semantic,
                                 const PointAnnotationSet& points, const GroupingConfig& cfg) {
  cfg.validate();
  require_same_shape(pred_offsets.shape(), semantic.shape(), "offsets vs semantic");
  const GridShape shape = semantic.shape();
  points.validate(shape);
  const double tau = cfg.tau_for(shape);
  const double tau2 = tau * tau;

  LabelGrid out(shape, 0);
  std::vector<std::size_t> count(points.size() + 1, 0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (cfg.require_foreground && semantic[i] == 0) continue;
    const Pixel p = shape.pixel(i);
    const double vy = p.y + pred_offsets.dy(i);
    const double vx = p.x + pred_offsets.dx(i);
    const AnnotationPoint* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& e : points.points) {
      const double d = (e.y - vy) * (e.y - vy) + (e.x - vx) * (e.x - vx);
      if (d < best_d || (d == best_d && e.instance_id < best->instance_id)) {
        best = &e;
        best_d = d;
      }
    }
    if (best && best_d <= tau2) {
      out[i] = best->instance_id;
      ++count[best->instance_id];
    }
  }

  std::vector<const AnnotationPoint*> order;
  for (const auto& e : points.points) order.push_back(&e);
  std::sort(order.begin(), order.end(),
            [](auto* a, auto* b) { return a->instance_id < b->instance_id; });
  const int side = cfg.pseudo_box_side;
  for (const auto* e : order) {
    if (count[e->instance_id] != 0) continue;
    const int y0 = e->y - side / 2;
    const int x0 = e->x - side / 2;
    for (int y = y0; y < y0 + side; ++y)
      for (int x = x0; x < x0 + side; ++x)
        if (shape.contains(y, x) && out(y, x) == 0) out(y, x) = e->instance_id;
  }
  return out;
}

struct PseudoLabels {
  LabelGrid instances;
  ClassTable classes;
};

/// Masks the class-agnostic grouping with the semantic map: background
/// pixels and pixels whose semantic class differs from the instance's point
/// class are cleared.
inline PseudoLabels finalize_pseudo_labels(const LabelGrid& grouped, const LabelGrid& semantic,
                                           const PointAnnotationSet& points) {
  require_same_shape(grouped.shape(), semantic.shape(), "grouped vs semantic");
  const auto cls = points.class_table();
  PseudoLabels out{LabelGrid(grouped.shape(), 0), {}};
  for (std::size_t i = 0; i < grouped.size(); ++i) {
    const auto id = grouped[i];
    if (id == 0) continue;
    if (id >= cls.size() || cls[id] == 0)
      throw Error("grouped id " + std::to_string(id) + " has no annotation point");
    if (semantic[i] == 0 || semantic[i] != cls[id]) continue;
    out.instances[i] = id;
    out.classes[id] = cls[id];
  }
  return out;
}

/// Class-index grid implied by an instance map and its point classes.
inline LabelGrid classes_from_instances(const LabelGrid& instances,
                                        const PointAnnotationSet& points) {
  const auto cls = points.class_table();
  LabelGrid out(instances.shape(), 0);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto id = instances[i];
    if (id != 0) out[i] = id < cls.size() ? cls[id] : 0;
  }
  return out;
}

}  // namespace mdm

#endif  // MDM_S2I_HPP
