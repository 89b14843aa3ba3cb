#include <gtest/gtest.h>

#include <deque>
#include <string>

#include "mdm/codec.hpp"
#include "mdm/components.hpp"
#include "mdm/rng.hpp"

using namespace mdm;

namespace {

Mask mask_from(const std::vector<std::string>& rows) {
  Mask m(rows.size(), rows[0].size(), 0);
  for (std::size_t y = 0; y < rows.size(); ++y)
    for (std::size_t x = 0; x < rows[y].size(); ++x)
      m(static_cast<int>(y), static_cast<int>(x)) = rows[y][x] == '#';
  return m;
}

// BFS flood fill, ids assigned on first encounter in raster order.
LabelGrid flood_fill(const Mask& m, int conn) {
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
            if (dy == 0 && dx == 0) continue;
            if (conn == 4 && dy != 0 && dx != 0) continue;
            const int ny = p.y + dy, nx = p.x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
            if (!m(ny, nx) || out(ny, nx)) continue;
            out(ny, nx) = next;
            q.push_back({ny, nx});
          }
      }
    }
  return out;
}

}  // namespace

TEST(ConnectedComponents, PlusShapeIsOneComponent) {
  const auto m = mask_from({".#.", "###", ".#."});
  const auto l = connected_components(m, Connectivity::Four);
  EXPECT_EQ(max_label(l), 1u);
  EXPECT_EQ(l(0, 1), 1u);
  EXPECT_EQ(l(0, 0), 0u);
}

TEST(ConnectedComponents, DiagonalPixelsDependOnConnectivity) {
  const auto m = mask_from({"#.", ".#"});
  EXPECT_EQ(max_label(connected_components(m, Connectivity::Four)), 2u);
  EXPECT_EQ(max_label(connected_components(m, Connectivity::Eight)), 1u);
}

TEST(ConnectedComponents, EmptyRasterIsAnError) {
  EXPECT_THROW(connected_components(Mask{}), Error);
}

TEST(ConnectedComponents, UShapeMergesLateLabels) {
  // Two arms get provisional labels that are only joined on the last row.
  const auto m = mask_from({"#..#", "#..#", "####"});
  const auto l = connected_components(m, Connectivity::Four);
  EXPECT_EQ(max_label(l), 1u);
}

TEST(ConnectedComponents, MatchesFloodFillOnRandomMasks) {
  Rng rng(42);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const double density = rng.uniform(0.2, 0.8);
    Mask m(h, w, 0);
    for (auto& v : m) v = rng.bernoulli(density);
    for (int conn : {4, 8}) {
      const auto got = connected_components(m, connectivity_from_int(conn));
      const auto want = flood_fill(m, conn);
      ASSERT_EQ(got, want) << "trial " << trial << " conn " << conn;
    }
  }
}

TEST(ConnectedComponents, RegionsByValueKeepClassesApart) {
  LabelGrid g(1, 4, std::vector<std::uint32_t>{1, 1, 2, 2});
  const auto l = connected_regions_by_value(g);
  EXPECT_EQ(l, LabelGrid(1, 4, std::vector<std::uint32_t>{1, 1, 2, 2}));
}

TEST(CompactLabels, RenumbersInRasterOrder) {
  LabelGrid g(1, 5, std::vector<std::uint32_t>{0, 9, 4, 9, 0});
  EXPECT_EQ(compact_labels(g), LabelGrid(1, 5, std::vector<std::uint32_t>{0, 1, 2, 1, 0}));
}

TEST(Pgm, SinglePixelLayout) {
  const auto bytes = encode_label_pgm(LabelGrid(1, 1, std::vector<std::uint32_t>{7}));
  const std::string expect = "P5\n1 1\n255\n\x07";
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), expect);
}

TEST(Pgm, WideIdsUseBigEndianSixteenBit) {
  const auto bytes = encode_label_pgm(LabelGrid(1, 2, std::vector<std::uint32_t>{258, 1}));
  const std::string header = "P5\n2 1\n65535\n";
  ASSERT_EQ(bytes.size(), header.size() + 4);
  EXPECT_EQ(bytes[header.size()], 0x01);
  EXPECT_EQ(bytes[header.size() + 1], 0x02);
  EXPECT_EQ(decode_label_pgm(bytes), LabelGrid(1, 2, std::vector<std::uint32_t>{258, 1}));
}

TEST(Pgm, RoundTripRandomGrids) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::uint32_t top = trial % 2 ? 255 : 65535;
    LabelGrid g(16, 16, 0);
    for (auto& v : g) v = static_cast<std::uint32_t>(rng.uniform_int(0, top));
    EXPECT_EQ(decode_label_pgm(encode_label_pgm(g)), g);
  }
}

TEST(Pgm, Errors) {
  EXPECT_THROW(encode_label_pgm(LabelGrid(1, 1, std::vector<std::uint32_t>{70000})), Error);
  auto bytes = encode_label_pgm(LabelGrid(2, 2, 3));
  bytes.pop_back();
  try {
    decode_label_pgm(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unexpected end of data"), std::string::npos);
  }
  const std::string bad = "P5\n2 x\n255\n";
  try {
    decode_label_pgm(Bytes(bad.begin(), bad.end()));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("byte 5"), std::string::npos) << e.what();
  }
}

TEST(Pgm, HeaderCommentsAreSkipped) {
  const std::string text = std::string("P5\n# made by hand\n1 1\n255\n") + '\x02';
  EXPECT_EQ(decode_label_pgm(Bytes(text.begin(), text.end()))[0], 2u);
}

TEST(Tensor, SmallMapLayout) {
  ClassScoreMap m(1, 1, 2, std::vector<double>{0.5, -1.0});
  const auto bytes = encode_tensor(m);
  ASSERT_EQ(bytes.size(), 4u + 4u + 12u + 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MDMT");
  EXPECT_EQ(bytes[4], 3);  // rank
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[16], 2);
  // 0.5f = 0x3f000000, little-endian
  EXPECT_EQ(bytes[20], 0x00);
  EXPECT_EQ(bytes[23], 0x3f);
  // -1.0f = 0xbf800000
  EXPECT_EQ(bytes[26], 0x80);
  EXPECT_EQ(bytes[27], 0xbf);
}

TEST(Tensor, RoundTripIsBitExact) {
  Rng rng(3);
  std::vector<double> data(8 * 8 * 3);
  for (auto& v : data) v = static_cast<float>(rng.uniform(-100, 100));
  ClassScoreMap m(8, 8, 3, data);
  const auto back = channel_map_from_tensor<ClassScoreMap>(decode_tensor(encode_tensor(m)));
  EXPECT_EQ(back, m);

  OffsetField f(4, 5);
  for (std::size_t i = 0; i < 20; ++i)
    if (i % 3) f.set(i, static_cast<float>(rng.uniform(-9, 9)), static_cast<float>(rng.uniform(-9, 9)));
  EXPECT_EQ(offset_field_from_tensor(decode_tensor(encode_tensor(f))), f);
}

TEST(Tensor, Errors) {
  const std::string bad = "XXXX\x01\x00\x00\x00\x01\x00\x00\x00";
  try {
    decode_tensor(Bytes(bad.begin(), bad.end()));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  auto bytes = encode_tensor(ClassScoreMap(2, 2, 2, 1.0));
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(decode_tensor(bytes), Error);
  ClassScoreMap nan_map(1, 1, 1, std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(encode_tensor(nan_map), Error);
}

TEST(PointsCsv, RoundTripAndValidation) {
  PointAnnotationSet set{{{1, 2, 3, 1}, {4, 5, 1, 2}}};
  const auto text = encode_points_csv(set);
  EXPECT_EQ(text, "y,x,class_id,instance_id\n1,2,3,1\n4,5,1,2\n");
  EXPECT_EQ(decode_points_csv(text), set);
  EXPECT_THROW(decode_points_csv("y,x,class\n1,2,3\n"), Error);
  EXPECT_THROW(decode_points_csv("y,x,class_id,instance_id\n1,a,3,1\n"), Error);

  EXPECT_NO_THROW(set.validate({6, 6}));
  EXPECT_THROW(set.validate({3, 3}), Error);
  PointAnnotationSet dup{{{0, 0, 1, 1}, {1, 1, 1, 1}}};
  EXPECT_THROW(dup.validate({3, 3}), Error);
}

TEST(Render, PaletteAndBlackBackground) {
  const auto ppm = render_label_ppm(LabelGrid(1, 3, std::vector<std::uint32_t>{0, 1, 17}));
  const std::string header = "P6\n3 1\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 9);
  EXPECT_EQ(ppm[header.size()], 0);
  EXPECT_EQ(ppm[header.size() + 3], kPalette[1][0]);
  EXPECT_EQ(ppm[header.size() + 6], kPalette[1][0]);  // 17 mod 16
}

TEST(Fnv, KnownVector) {
  const std::string a = "a";
  EXPECT_EQ(fnv1a64(Bytes(a.begin(), a.end())), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64(Bytes{}), 0xcbf29ce484222325ULL);
}
