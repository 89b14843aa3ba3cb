#ifndef MDM_CODEC_HPP
#define MDM_CODEC_HPP

// Byte-level formats:
//   label grids   binary PGM (P5); maxval 255 with one byte per pixel, or
//                 maxval 65535 with two big-endian bytes when any id > 255.
//   real tensors  "MDMT" | u32 rank | u32 dims[rank] | f32 values, all
//                 little-endian, values row-major.
//   points        CSV "y,x,class_id,instance_id" with a header row.
//   classes       CSV "instance_id,class_id" with a header row.
//   renders       binary PPM (P6), 16-colour palette indexed by id mod 16.

#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mdm/grid.hpp"

namespace mdm {

using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------- PGM

inline Bytes encode_label_pgm(const LabelGrid& grid) {
  if (grid.empty()) throw Error("empty raster");
  const std::uint32_t top = max_label(grid);
  if (top > 65535) throw Error("label id " + std::to_string(top) + " exceeds 65535");
  const bool wide = top > 255;
  const std::string header = "P5\n" + std::to_string(grid.width()) + " " +
                             std::to_string(grid.height()) + "\n" + (wide ? "65535" : "255") +
                             "\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + grid.size() * (wide ? 2 : 1));
  for (auto v : grid) {
    if (wide) out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

namespace detail {

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, const char* format)
      : bytes_(bytes), format_(format) {}

  void expect_magic(std::string_view magic) {
    if (bytes_.size() < magic.size())
      fail("unexpected end of data");
    for (std::size_t i = 0; i < magic.size(); ++i)
      if (bytes_[i] != static_cast<std::uint8_t>(magic[i])) fail("bad magic");
    pos_ = magic.size();
  }

  std::uint64_t number() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) fail("unexpected end of data");
    if (!std::isdigit(bytes_[pos_])) fail("expected a decimal number");
    std::uint64_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 0xffffffffULL) fail("number too large");
      ++pos_;
    }
    return v;
  }

  /// Exactly one whitespace byte separates the header from the payload.
  void end_header() {
    if (pos_ >= bytes_.size()) fail("unexpected end of data");
    if (!std::isspace(bytes_[pos_])) fail("expected whitespace after header");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(std::string(format_) + " decode error at byte " + std::to_string(pos_) + ": " +
                what);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  const char* format_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline LabelGrid decode_label_pgm(std::span<const std::uint8_t> bytes) {
  detail::HeaderReader rd(bytes, "PGM");
  rd.expect_magic("P5");
  const auto width = rd.number();
  const auto height = rd.number();
  const auto maxval = rd.number();
  if (width == 0 || height == 0) rd.fail("empty raster");
  if (maxval == 0 || maxval > 65535) rd.fail("maxval out of range");
  rd.end_header();
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(width * height);
  if (bytes.size() - rd.pos() < n * bpp) rd.fail("unexpected end of data");
  std::vector<std::uint32_t> data(n);
  const std::uint8_t* p = bytes.data() + rd.pos();
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = bpp == 2 ? (std::uint32_t{p[2 * i]} << 8) | p[2 * i + 1] : p[i];
  }
  return LabelGrid(static_cast<std::size_t>(height), static_cast<std::size_t>(width),
                   std::move(data));
}

// ---------------------------------------------------------------- MDMT

/// Generic decoded tensor; values are the stored 32-bit floats.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

}  // namespace detail

inline Bytes encode_tensor(const Tensor& t) {
  if (t.values.size() != t.element_count()) throw Error("MDMT encode: dim/payload mismatch");
  Bytes out{'M', 'D', 'M', 'T'};
  out.reserve(8 + 4 * t.dims.size() + 4 * t.values.size());
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  for (float v : t.values) {
    if (!std::isfinite(v)) throw Error("MDMT encode: non-finite value");
    detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) {
    if (bytes.size() >= 4 && !(bytes[0] == 'M' && bytes[1] == 'D' && bytes[2] == 'M' &&
                               bytes[3] == 'T'))
      throw Error("MDMT decode error: bad magic");
    throw Error("MDMT decode error: unexpected end of data");
  }
  if (!(bytes[0] == 'M' && bytes[1] == 'D' && bytes[2] == 'M' && bytes[3] == 'T'))
    throw Error("MDMT decode error: bad magic");
  const std::uint32_t rank = detail::get_u32(bytes.data() + 4);
  if (rank > 16 || bytes.size() < 8 + 4 * std::size_t{rank})
    throw Error("MDMT decode error: dim/payload mismatch");
  Tensor t;
  t.dims.resize(rank);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.dims[i] = detail::get_u32(bytes.data() + 8 + 4 * i);
    count *= t.dims[i];
  }
  const std::size_t payload = bytes.size() - 8 - 4 * std::size_t{rank};
  if (payload != 4 * count) throw Error("MDMT decode error: dim/payload mismatch");
  t.values.resize(count);
  const std::uint8_t* p = bytes.data() + 8 + 4 * rank;
  for (std::size_t i = 0; i < count; ++i)
    t.values[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
  return t;
}

template <class Tag>
Tensor to_tensor(const ChannelMap<Tag>& map) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(map.height()), static_cast<std::uint32_t>(map.width()),
            static_cast<std::uint32_t>(map.channels())};
  t.values.reserve(map.data().size());
  for (double v : map.data()) t.values.push_back(static_cast<float>(v));
  return t;
}

/// Offset fields are stored as H x W x 3: dy, dx, valid (0 or 1).
inline Tensor to_tensor(const OffsetField& field) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(field.height()), static_cast<std::uint32_t>(field.width()),
            3};
  const std::size_t n = field.shape().size();
  t.values.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    t.values.push_back(static_cast<float>(field.dy(i)));
    t.values.push_back(static_cast<float>(field.dx(i)));
    t.values.push_back(field.valid(i) ? 1.0f : 0.0f);
  }
  return t;
}

template <class Map>
Map channel_map_from_tensor(const Tensor& t) {
  if (t.dims.size() != 3) throw Error("MDMT: expected a rank-3 tensor");
  std::vector<double> data(t.values.begin(), t.values.end());
  return Map(t.dims[0], t.dims[1], t.dims[2], std::move(data));
}

inline OffsetField offset_field_from_tensor(const Tensor& t) {
  if (t.dims.size() != 3 || t.dims[2] != 3)
    throw Error("MDMT: offset field must be H x W x 3");
  OffsetField f(t.dims[0], t.dims[1]);
  for (std::size_t i = 0; i < f.shape().size(); ++i) {
    const float valid = t.values[3 * i + 2];
    if (valid != 0.0f && valid != 1.0f) throw Error("MDMT: offset validity must be 0 or 1");
    if (valid == 1.0f) f.set(i, t.values[3 * i], t.values[3 * i + 1]);
  }
  return f;
}

template <class Tag>
Bytes encode_tensor(const ChannelMap<Tag>& map) {
  return encode_tensor(to_tensor(map));
}
inline Bytes encode_tensor(const OffsetField& field) { return encode_tensor(to_tensor(field)); }

// ---------------------------------------------------------------- CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.back()))) cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && std::isspace(static_cast<unsigned char>(cell[b]))) ++b;
    cells.push_back(cell.substr(b));
  }
  return cells;
}

inline long long parse_int_cell(const std::string& cell, std::size_t line_no) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != cell.size())
    throw Error("CSV line " + std::to_string(line_no) + ": '" + cell + "' is not an integer");
  return v;
}

inline std::vector<std::vector<long long>> parse_int_csv(std::string_view text,
                                                         std::string_view header,
                                                         std::size_t columns) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  std::vector<std::vector<long long>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != header)
        throw Error("CSV header must be '" + std::string(header) + "', got '" + line + "'");
      saw_header = true;
      continue;
    }
    const auto cells = split_csv_line(line);
    if (cells.size() != columns)
      throw Error("CSV line " + std::to_string(line_no) + ": expected " +
                  std::to_string(columns) + " columns");
    std::vector<long long> row;
    for (const auto& c : cells) row.push_back(parse_int_cell(c, line_no));
    rows.push_back(std::move(row));
  }
  if (!saw_header) throw Error("CSV is empty");
  return rows;
}

}  // namespace detail

inline std::string encode_points_csv(const PointAnnotationSet& set) {
  std::string out = "y,x,class_id,instance_id\n";
  for (const auto& p : set.points)
    out += std::to_string(p.y) + "," + std::to_string(p.x) + "," + std::to_string(p.class_id) +
           "," + std::to_string(p.instance_id) + "\n";
  return out;
}

inline PointAnnotationSet decode_points_csv(std::string_view text) {
  PointAnnotationSet set;
  for (const auto& r : detail::parse_int_csv(text, "y,x,class_id,instance_id", 4)) {
    if (r[2] < 0 || r[3] < 0) throw Error("points CSV: negative id");
    set.points.push_back({static_cast<int>(r[0]), static_cast<int>(r[1]),
                          static_cast<std::uint32_t>(r[2]), static_cast<std::uint32_t>(r[3])});
  }
  return set;
}

/// instance id -> class id
using ClassTable = std::map<std::uint32_t, std::uint32_t>;

inline std::string encode_classes_csv(const ClassTable& classes) {
  std::string out = "instance_id,class_id\n";
  for (const auto& [id, cls] : classes)
    out += std::to_string(id) + "," + std::to_string(cls) + "\n";
  return out;
}

inline ClassTable decode_classes_csv(std::string_view text) {
  ClassTable classes;
  for (const auto& r : detail::parse_int_csv(text, "instance_id,class_id", 2)) {
    if (r[0] <= 0 || r[1] < 0) throw Error("classes CSV: ids must be positive");
    classes[static_cast<std::uint32_t>(r[0])] = static_cast<std::uint32_t>(r[1]);
  }
  return classes;
}

// ---------------------------------------------------------------- PPM

inline constexpr std::array<std::array<std::uint8_t, 3>, 16> kPalette = {{
    {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
    {245, 130, 48}, {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
    {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
}};

inline Bytes render_label_ppm(const LabelGrid& grid) {
  if (grid.empty()) throw Error("empty raster");
  const std::string header =
      "P6\n" + std::to_string(grid.width()) + " " + std::to_string(grid.height()) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (auto v : grid) {
    if (v == 0) {
      out.insert(out.end(), {0, 0, 0});
    } else {
      const auto& c = kPalette[v % 16];
      out.insert(out.end(), c.begin(), c.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------- files

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace mdm

#endif  // MDM_CODEC_HPP
