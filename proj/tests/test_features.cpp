#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "mfer/error.hpp"
#include "mfer/features.hpp"
#include "mfer/rng.hpp"
#include "oracles.hpp"

using namespace mfer;

namespace {

// Exact area integration: each output cell averages the input over its
// rectangle, weighting each source pixel by its overlap.
GrayImage area_oracle(const GrayImage& img, int ow, int oh) {
  GrayImage out(ow, oh);
  const double sx = static_cast<double>(img.width) / ow;
  const double sy = static_cast<double>(img.height) / oh;
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      const double x0 = j * sx, x1 = (j + 1) * sx, y0 = i * sy, y1 = (i + 1) * sy;
      double acc = 0.0;
      for (int y = 0; y < img.height; ++y) {
        const double oy = std::max(0.0, std::min<double>(y + 1, y1) - std::max<double>(y, y0));
        for (int x = 0; x < img.width; ++x) {
          const double ox = std::max(0.0, std::min<double>(x + 1, x1) - std::max<double>(x, x0));
          acc += ox * oy * img.at(x, y);
        }
      }
      out.at(j, i) = acc / (sx * sy);
    }
  }
  return out;
}

LbpWindow window_at(const GrayImage& img, int cx, int cy) {
  LbpWindow w;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) w[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)] = img.at(cx + dx, cy + dy);
  return w;
}

// Cell histograms before block normalization, from magnitudes and angles
// computed pixel by pixel with bin centers at (b + 0.5) * pi / bins.
std::vector<double> hog_cells_oracle(const GrayImage& img, int cell, int bins) {
  const int cx = img.width / cell, cy = img.height / cell;
  std::vector<double> h(static_cast<std::size_t>(cx * cy * bins), 0.0);
  const double width = std::numbers::pi / bins;
  for (int y = 0; y < cy * cell; ++y) {
    for (int x = 0; x < cx * cell; ++x) {
      const double gx = img.clamped(x + 1, y) - img.clamped(x - 1, y);
      const double gy = img.clamped(x, y + 1) - img.clamped(x, y - 1);
      const double q = std::hypot(gx, gy);
      if (q == 0.0) continue;
      double theta = std::atan2(gy, gx);
      while (theta < 0.0) theta += std::numbers::pi;
      while (theta >= std::numbers::pi) theta -= std::numbers::pi;
      for (int b = 0; b < bins; ++b) {
        // circular distance to each bin center, in bin widths
        double d = std::abs(theta - (b + 0.5) * width) / width;
        d = std::min(d, bins - d);
        if (d < 1.0) h[static_cast<std::size_t>(((y / cell) * cx + x / cell) * bins + b)] += (1.0 - d) * q;
      }
    }
  }
  return h;
}

}  // namespace

TEST_CASE("avg_pool_resize") {
  const GrayImage four(4, 4, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  const auto two = avg_pool_resize(four, 2, 2);
  CHECK(two.data == std::vector<double>{3.5, 5.5, 11.5, 13.5});
  CHECK(avg_pool_resize(four, 4, 4) == four);
  CHECK_THROWS_AS(avg_pool_resize(four, 0, 2), ValidationError);

  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    const GrayImage img = oracle::random_image(3, 3, rng);
    const auto a = avg_pool_resize(img, 2, 2);
    const auto b = area_oracle(img, 2, 2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-12);
  }
  const int sizes[][4] = {{7, 5, 3, 4}, {48, 16, 140, 40}, {13, 13, 5, 9}};
  for (const auto& s : sizes) {
    const GrayImage img = oracle::random_image(s[0], s[1], rng);
    const auto a = avg_pool_resize(img, s[2], s[3]);
    const auto b = area_oracle(img, s[2], s[3]);
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(a.data[i] - b.data[i]) < 1e-12);
      ma += a.data[i];
    }
    for (double v : img.data) mb += v;
    CHECK(std::abs(ma / a.size() - mb / img.size()) < 1e-12);
  }
}

TEST_CASE("crop_regions") {
  Rng rng(22);
  const GrayImage face = oracle::random_image(48, 48, rng);
  const auto r = crop_regions(face);
  CHECK(r.eyes.width == 140);
  CHECK(r.eyes.height == 40);
  CHECK(r.face.width == 200);
  CHECK(r.face.height == 200);
  CHECK(r.mouth.width == 140);
  CHECK(r.mouth.height == 40);
  // Eyes come from rows 0..15 and mouth from rows 32..47.
  CHECK(r.eyes == avg_pool_resize(crop(face, 0, 0, 48, 16), 140, 40));
  CHECK(r.mouth == avg_pool_resize(crop(face, 0, 32, 48, 16), 140, 40));

  const auto flat = crop_regions(GrayImage(30, 30, 0.7));
  for (const auto* img : {&flat.eyes, &flat.face, &flat.mouth})
    for (double v : img->data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  const auto big = crop_regions(oracle::random_image(300, 300, rng));
  CHECK(big.face.width == 200);
  CHECK(big.eyes.height == 40);

  const auto mirrored = crop_regions(mirror_horizontal(face));
  const auto mirror_eyes = mirror_horizontal(r.eyes);
  const auto mirror_mouth = mirror_horizontal(r.mouth);
  for (std::size_t i = 0; i < mirror_eyes.size(); ++i) {
    CHECK(mirrored.eyes.data[i] == doctest::Approx(mirror_eyes.data[i]).epsilon(1e-12));
    CHECK(mirrored.mouth.data[i] == doctest::Approx(mirror_mouth.data[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(crop_regions(GrayImage(2, 5)), ValidationError);
}

TEST_CASE("lbp_code worked examples") {
  // Neighbors in order E, NE, N, NW, W, SW, S, SE: 6,4,5,3,7,2,8,1 around 5.
  const std::array<double, 8> g{6, 4, 5, 3, 7, 2, 8, 1};
  CHECK(oracle::lbp_from_neighbors(g, 5.0) == 85);
  LbpWindow w{};
  w[4] = 5.0;
  for (int i = 0; i < 8; ++i) w[kLbpNeighborIndex[static_cast<std::size_t>(i)]] = g[static_cast<std::size_t>(i)];
  CHECK(lbp_code(w) == 85);
  CHECK(oracle::lbp_code(w) == 85);

  LbpWindow same;
  same.fill(0.3);
  CHECK(lbp_code(same) == 255);
  LbpWindow below;
  below.fill(0.1);
  below[4] = 0.9;
  CHECK(lbp_code(below) == 0);
}

TEST_CASE("lbp_code agrees with the angle-based definition") {
  Rng rng(23);
  for (int t = 0; t < 5000; ++t) {
    LbpWindow w;
    // Small integer levels make ties common.
    for (double& v : w) v = static_cast<double>(rng.below(4));
    CHECK(lbp_code(w) == oracle::lbp_code(w));
  }
}

TEST_CASE("lbp_code is invariant to monotone intensity maps") {
  Rng rng(24);
  for (int t = 0; t < 500; ++t) {
    LbpWindow w;
    for (double& v : w) v = rng.uniform(0.0, 1.0);
    LbpWindow m;
    for (std::size_t i = 0; i < 9; ++i) m[i] = std::exp(3.0 * w[i]) + 0.5 * w[i] * w[i] * w[i];
    CHECK(lbp_code(w) == lbp_code(m));
  }
}

TEST_CASE("lbp_histogram") {
  const auto flat = lbp_histogram(GrayImage(6, 6, 0.4), 1, 1);
  CHECK(flat.values.size() == 256);
  for (int b = 0; b < 256; ++b) CHECK(flat.values[static_cast<std::size_t>(b)] == (b == 255 ? 1.0 : 0.0));

  Rng rng(25);
  const GrayImage img = oracle::random_image(5, 5, rng);
  const auto h = lbp_histogram(img, 1, 1);
  std::vector<double> counts(256, 0.0);
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) counts[static_cast<std::size_t>(oracle::lbp_code(window_at(img, x, y)))] += 1.0;
  for (int b = 0; b < 256; ++b) CHECK(h.values[static_cast<std::size_t>(b)] == counts[static_cast<std::size_t>(b)] / 9.0);

  const auto grid = lbp_histogram(oracle::random_image(17, 11, rng), 2, 2);
  CHECK(grid.values.size() == 1024);
  CHECK(grid.layout.size() == 4);
  CHECK(grid.well_formed());
  for (const auto& seg : grid.layout) {
    double s = 0.0;
    for (std::size_t i = 0; i < seg.length; ++i) {
      CHECK(grid.values[seg.offset + i] >= 0.0);
      s += grid.values[seg.offset + i];
    }
    CHECK(s == doctest::Approx(1.0));
  }

  // 4x4 interior split into 5 columns leaves empty cells that stay all zero.
  const auto sparse = lbp_histogram(oracle::random_image(6, 6, rng), 5, 1);
  double first = 0.0;
  for (int b = 0; b < 256; ++b) first += sparse.values[static_cast<std::size_t>(b)];
  CHECK(first == 0.0);
  CHECK_THROWS_AS(lbp_histogram(GrayImage(2, 9), 1, 1), ValidationError);
  CHECK_THROWS_AS(lbp_histogram(GrayImage(9, 9), 0, 1), ValidationError);
}

TEST_CASE("gradients") {
  const auto zero = gradients(GrayImage(5, 4, 0.3));
  for (double v : zero.gx) CHECK(v == 0.0);
  for (double v : zero.gy) CHECK(v == 0.0);

  GrayImage ramp(6, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) ramp.at(x, y) = x;
  const auto g = gradients(ramp);
  for (int y = 0; y < 5; ++y) {
    for (int x = 1; x < 5; ++x) {
      CHECK(g.gx[static_cast<std::size_t>(y * 6 + x)] == 2.0);
      CHECK(g.gy[static_cast<std::size_t>(y * 6 + x)] == 0.0);
    }
  }

  Rng rng(26);
  const GrayImage img = oracle::random_image(7, 5, rng);
  const auto a = gradients(img);
  const auto t = gradients(transpose(img));
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 7; ++x) {
      CHECK(t.gx[static_cast<std::size_t>(x * 5 + y)] == a.gy[static_cast<std::size_t>(y * 7 + x)]);
      CHECK(t.gy[static_cast<std::size_t>(x * 5 + y)] == a.gx[static_cast<std::size_t>(y * 7 + x)]);
    }
  }
  CHECK_THROWS_AS(gradients(GrayImage(2, 3)), ValidationError);
}

TEST_CASE("magnitude and orientation") {
  CHECK(gradient_magnitude(3.0, 4.0) == doctest::Approx(5.0));
  CHECK(gradient_orientation(3.0, 4.0) == doctest::Approx(std::atan(4.0 / 3.0)));
  CHECK(gradient_orientation(3.0, 4.0) == doctest::Approx(0.9273).epsilon(1e-4));
  CHECK(gradient_orientation(0.0, 2.0) == doctest::Approx(std::numbers::pi / 2));
  CHECK(gradient_orientation(0.0, -2.0) == doctest::Approx(std::numbers::pi / 2));
  CHECK(gradient_orientation(-1.0, 0.0) == 0.0);
  Rng rng(27);
  for (int t = 0; t < 1000; ++t) {
    const double o = gradient_orientation(rng.normal(0, 1), rng.normal(0, 1));
    CHECK(o >= 0.0);
    CHECK(o < std::numbers::pi);
  }
}

TEST_CASE("hog_descriptor") {
  const auto zero = hog_descriptor(GrayImage(16, 16, 0.5), 8, 9);
  CHECK(zero.values.size() == 36);
  for (double v : zero.values) CHECK(v == 0.0);

  Rng rng(28);
  const GrayImage img = oracle::random_image(16, 16, rng);
  const auto d = hog_descriptor(img, 8, 9);
  CHECK(d.values.size() == 36);
  const auto cells = hog_cells_oracle(img, 8, 9);
  double sq = 0.0;
  for (double v : cells) sq += v * v;
  const double norm = std::sqrt(sq + 1e-12);
  for (std::size_t i = 0; i < 36; ++i) CHECK(d.values[i] == doctest::Approx(cells[i] / norm).epsilon(1e-12));

  // (cells_x - 1) * (cells_y - 1) * 4 * bins, partial cells dropped.
  CHECK(hog_descriptor(oracle::random_image(47, 35, rng), 10, 9).values.size() == 3 * 2 * 4 * 9);
  CHECK_THROWS_AS(hog_descriptor(GrayImage(7, 20), 8, 9), ValidationError);
  CHECK_THROWS_AS(hog_descriptor(GrayImage(16, 16), 8, 1), ValidationError);
}

TEST_CASE("hog is invariant to offset and scale") {
  Rng rng(29);
  for (int t = 0; t < 5; ++t) {
    const GrayImage img = oracle::random_image(40, 30, rng);
    const auto base = hog_descriptor(img, 10, 9);
    GrayImage shifted = img;
    for (double& v : shifted.data) v += 0.37;
    const auto s = hog_descriptor(shifted, 10, 9);
    for (std::size_t i = 0; i < base.values.size(); ++i) CHECK(std::abs(s.values[i] - base.values[i]) < 1e-9);
    for (double k : {0.5, 2.0}) {
      GrayImage scaled = img;
      for (double& v : scaled.data) v *= k;
      const auto sc = hog_descriptor(scaled, 10, 9);
      for (std::size_t i = 0; i < base.values.size(); ++i) CHECK(std::abs(sc.values[i] - base.values[i]) < 1e-6);
    }
  }
}

TEST_CASE("handcrafted_descriptor layout") {
  // eyes and mouth: 8*256 + 13*3*36; face: 25*256 + 19*19*36.
  CHECK(handcrafted_length() == 26300);
  Rng rng(30);
  const auto regions = crop_regions(oracle::random_image(48, 48, rng));
  const auto d = handcrafted_descriptor(regions);
  CHECK(d.values.size() == 26300);
  CHECK(d.well_formed());
  CHECK(d.layout.front().name.rfind("eyes.lbp", 0) == 0);
  CHECK(d.layout.back().name.rfind("mouth.hog", 0) == 0);
  const auto again = handcrafted_descriptor(regions);
  CHECK(again.values == d.values);
  CHECK(again.layout == d.layout);

  // One segment per region and kind: eyes.lbp, eyes.hog, face.lbp, face.hog, mouth.lbp, mouth.hog.
  std::vector<std::string> order;
  for (const auto& s : d.layout) order.push_back(s.name);
  CHECK(order == std::vector<std::string>{"eyes.lbp", "eyes.hog", "face.lbp", "face.hog", "mouth.lbp", "mouth.hog"});

  const auto flat = handcrafted_descriptor(crop_regions(GrayImage(48, 48, 0.2)));
  for (const auto& s : flat.layout) {
    const bool lbp = s.name.find(".lbp") != std::string::npos;
    for (std::size_t i = 0; i < s.length; ++i) {
      const double v = flat.values[s.offset + i];
      if (lbp) CHECK(v == (i % 256 == 255 ? 1.0 : 0.0));
      else CHECK(v == 0.0);
    }
  }

  DescriptorConfig swapped;
  swapped.region_order = {"face", "eyes", "mouth"};
  CHECK_THROWS_AS(handcrafted_descriptor(regions, swapped), ValidationError);

  FeatureDescriptor bad;
  bad.values = {1.0, 2.0};
  bad.layout = {{"a", 0, 1}};
  CHECK_FALSE(bad.well_formed());
}
