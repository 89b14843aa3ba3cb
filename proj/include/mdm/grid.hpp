#ifndef MDM_GRID_HPP
#define MDM_GRID_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mdm {

/// Base error for every data-level failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Pixel {
  int y = 0;
  int x = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return height * width; }
  bool contains(int y, int x) const {
    return y >= 0 && x >= 0 && static_cast<std::size_t>(y) < height &&
           static_cast<std::size_t>(x) < width;
  }
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
  }
  Pixel pixel(std::size_t idx) const {
    return {static_cast<int>(idx / width), static_cast<int>(idx % width)};
  }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Row-major single-channel raster.
template <class T>
class Raster {
 public:
  using value_type = T;

  Raster() = default;
  Raster(std::size_t height, std::size_t width, T fill = T{})
      : shape_{height, width}, data_(height * width, fill) {}
  Raster(GridShape shape, T fill = T{}) : Raster(shape.height, shape.width, fill) {}
  Raster(std::size_t height, std::size_t width, std::vector<T> data)
      : shape_{height, width}, data_(std::move(data)) {
    if (data_.size() != height * width)
      throw Error("raster data length does not match dimensions");
  }

  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const GridShape& shape() const { return shape_; }

  T& operator()(int y, int x) { return data_[shape_.index(y, x)]; }
  const T& operator()(int y, int x) const { return data_[shape_.index(y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(Pixel p) { return (*this)(p.y, p.x); }
  const T& at(Pixel p) const { return (*this)(p.y, p.x); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  GridShape shape_{};
  std::vector<T> data_;
};

/// Instance or class-index raster; 0 is background everywhere.
using LabelGrid = Raster<std::uint32_t>;
using Mask = Raster<std::uint8_t>;

/// H x W x C real-valued map. The tag keeps class scores, features and
/// embeddings from being mixed up.
template <class Tag>
class ChannelMap {
 public:
  ChannelMap() = default;
  ChannelMap(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : shape_{height, width}, channels_(channels), data_(height * width * channels, fill) {}
  ChannelMap(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
      : shape_{height, width}, channels_(channels), data_(std::move(data)) {
    if (data_.size() != height * width * channels)
      throw Error("channel map data length does not match dimensions");
  }

  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t channels() const { return channels_; }
  std::size_t pixels() const { return shape_.size(); }
  const GridShape& shape() const { return shape_; }

  std::span<double> row(std::size_t pixel) {
    return {data_.data() + pixel * channels_, channels_};
  }
  std::span<const double> row(std::size_t pixel) const {
    return {data_.data() + pixel * channels_, channels_};
  }
  double& operator()(int y, int x, std::size_t c) {
    return data_[shape_.index(y, x) * channels_ + c];
  }
  double operator()(int y, int x, std::size_t c) const {
    return data_[shape_.index(y, x) * channels_ + c];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const ChannelMap&, const ChannelMap&) = default;

 private:
  GridShape shape_{};
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

struct ClassScoreTag {};
struct FeatureTag {};
struct EmbeddingTag {};

/// Channel 0 is background; channels 1..C are object classes.
using ClassScoreMap = ChannelMap<ClassScoreTag>;
using FeatureMap = ChannelMap<FeatureTag>;
using EmbeddingMap = ChannelMap<EmbeddingTag>;

/// Per-pixel (dy, dx) vectors in pixel units plus a validity mask.
/// Invalid pixels always hold (0, 0).
class OffsetField {
 public:
  OffsetField() = default;
  OffsetField(std::size_t height, std::size_t width)
      : shape_{height, width}, vectors_(2 * height * width, 0.0), valid_(height * width, 0) {}
  explicit OffsetField(GridShape shape) : OffsetField(shape.height, shape.width) {}

  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  const GridShape& shape() const { return shape_; }

  double dy(std::size_t i) const { return vectors_[2 * i]; }
  double dx(std::size_t i) const { return vectors_[2 * i + 1]; }
  bool valid(std::size_t i) const { return valid_[i] != 0; }

  void set(std::size_t i, double dy, double dx) {
    vectors_[2 * i] = dy;
    vectors_[2 * i + 1] = dx;
    valid_[i] = 1;
  }
  void clear(std::size_t i) {
    vectors_[2 * i] = 0.0;
    vectors_[2 * i + 1] = 0.0;
    valid_[i] = 0;
  }

  std::span<double> vectors() { return vectors_; }
  std::span<const double> vectors() const { return vectors_; }
  std::span<const std::uint8_t> valid_mask() const { return valid_; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid_) n += v != 0;
    return n;
  }

  friend bool operator==(const OffsetField&, const OffsetField&) = default;

 private:
  GridShape shape_{};
  std::vector<double> vectors_;
  std::vector<std::uint8_t> valid_;
};

struct AnnotationPoint {
  int y = 0;
  int x = 0;
  std::uint32_t class_id = 0;
  std::uint32_t instance_id = 0;

  Pixel pixel() const { return {y, x}; }
  friend bool operator==(const AnnotationPoint&, const AnnotationPoint&) = default;
};

/// One point per instance. Instance ids are exactly 1..K.
struct PointAnnotationSet {
  std::vector<AnnotationPoint> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  const AnnotationPoint* find(std::uint32_t instance_id) const {
    for (const auto& p : points)
      if (p.instance_id == instance_id) return &p;
    return nullptr;
  }

  /// Throws unless every point lies on the grid and ids are a permutation of 1..K.
  void validate(GridShape shape) const {
    std::vector<std::uint8_t> seen(points.size() + 1, 0);
    for (const auto& p : points) {
      if (!shape.contains(p.y, p.x))
        throw Error("annotation point (" + std::to_string(p.y) + "," + std::to_string(p.x) +
                    ") lies outside the grid");
      if (p.instance_id == 0 || p.instance_id > points.size() || seen[p.instance_id])
        throw Error("annotation instance ids must be exactly 1..K");
      if (p.class_id == 0) throw Error("annotation class ids start at 1");
      seen[p.instance_id] = 1;
    }
  }

  /// Class of each instance id, index 0 unused.
  std::vector<std::uint32_t> class_table() const {
    std::vector<std::uint32_t> table(points.size() + 1, 0);
    for (const auto& p : points)
      if (p.instance_id < table.size()) table[p.instance_id] = p.class_id;
    return table;
  }

  friend bool operator==(const PointAnnotationSet&, const PointAnnotationSet&) = default;
};

inline std::uint32_t max_label(const LabelGrid& grid) {
  std::uint32_t m = 0;
  for (auto v : grid) m = v > m ? v : m;
  return m;
}

inline void require_same_shape(GridShape a, GridShape b, const char* what) {
  if (!(a == b)) throw Error(std::string("shape mismatch: ") + what);
}

}  // namespace mdm

#endif  // MDM_GRID_HPP
