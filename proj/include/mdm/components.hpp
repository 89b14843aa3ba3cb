#ifndef MDM_COMPONENTS_HPP
#define MDM_COMPONENTS_HPP

#include <cstdint>
#include <numeric>
#include <vector>

#include "mdm/grid.hpp"

namespace mdm {

enum class Connectivity { Four = 4, Eight = 8 };

inline Connectivity connectivity_from_int(int c) {
  if (c == 4) return Connectivity::Four;
  if (c == 8) return Connectivity::Eight;
  throw Error("connectivity must be 4 or 8");
}

namespace detail {

class DisjointSet {
 public:
  std::uint32_t make() {
    parent_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return parent_.back();
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b)
      parent_[b] = a;
    else
      parent_[a] = b;
  }
  std::size_t size() const { return parent_.size(); }

 private:
  std::vector<std::uint32_t> parent_;
};

}  // namespace detail

/// Two-pass union-find labeling. Pixels with a nonzero value are linked when
/// `same(a, b)` holds for the two values. Output ids are 1..N in raster order
/// of each component's first pixel.
template <class T, class SameRegion>
LabelGrid label_components(const Raster<T>& input, Connectivity connectivity,
                           SameRegion same) {
  if (input.empty()) throw Error("empty raster");
  const int h = static_cast<int>(input.height());
  const int w = static_cast<int>(input.width());

  LabelGrid provisional(input.height(), input.width(), 0);
  detail::DisjointSet sets;
  sets.make();  // slot 0 is background

  // Already-scanned neighbours: W, NW, N, NE.
  const int dy8[] = {0, -1, -1, -1};
  const int dx8[] = {-1, -1, 0, 1};
  const bool use_diag = connectivity == Connectivity::Eight;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T v = input(y, x);
      if (v == T{}) continue;
      std::uint32_t label = 0;
      for (int k = 0; k < 4; ++k) {
        const bool diagonal = dx8[k] != 0 && dy8[k] != 0;
        if (diagonal && !use_diag) continue;
        const int ny = y + dy8[k];
        const int nx = x + dx8[k];
        if (ny < 0 || nx < 0 || nx >= w) continue;
        const T nv = input(ny, nx);
        if (nv == T{} || !same(v, nv)) continue;
        const std::uint32_t nl = provisional(ny, nx);
        if (label == 0)
          label = nl;
        else
          sets.unite(label, nl);
      }
      if (label == 0) label = sets.make();
      provisional(y, x) = label;
    }
  }

  std::vector<std::uint32_t> remap(sets.size(), 0);
  std::uint32_t next = 0;
  LabelGrid out(input.height(), input.width(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t l = provisional[i];
    if (l == 0) continue;
    const std::uint32_t root = sets.find(l);
    if (remap[root] == 0) remap[root] = ++next;
    out[i] = remap[root];
  }
  return out;
}

/// Labels the foreground of a binary mask.
template <class T>
LabelGrid connected_components(const Raster<T>& mask,
                               Connectivity connectivity = Connectivity::Eight) {
  return label_components(mask, connectivity, [](T, T) { return true; });
}

/// Labels each connected run of equal nonzero values separately, so
/// touching regions of different classes stay apart.
inline LabelGrid connected_regions_by_value(const LabelGrid& grid,
                                            Connectivity connectivity = Connectivity::Eight) {
  return label_components(grid, connectivity,
                          [](std::uint32_t a, std::uint32_t b) { return a == b; });
}

/// Renumbers nonzero ids to 1..N in raster order of first appearance.
inline LabelGrid compact_labels(const LabelGrid& grid) {
  std::vector<std::uint32_t> remap(max_label(grid) + 1, 0);
  std::uint32_t next = 0;
  LabelGrid out(grid.shape(), 0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto v = grid[i];
    if (v == 0) continue;
    if (remap[v] == 0) remap[v] = ++next;
    out[i] = remap[v];
  }
  return out;
}

}  // namespace mdm

#endif  // MDM_COMPONENTS_HPP
