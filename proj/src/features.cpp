#include "mfer/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mfer/error.hpp"

namespace mfer {

void FeatureDescriptor::append(std::string name, std::span<const double> segment) {
  layout.push_back(Segment{std::move(name), values.size(), segment.size()});
  values.insert(values.end(), segment.begin(), segment.end());
}

void FeatureDescriptor::append(const std::string& prefix, const FeatureDescriptor& other) {
  for (const auto& seg : other.layout) {
    append(prefix + seg.name,
           std::span<const double>(other.values).subspan(seg.offset, seg.length));
  }
}

bool FeatureDescriptor::well_formed() const {
  std::size_t expect = 0;
  for (const auto& seg : layout) {
    if (seg.offset != expect) return false;
    expect += seg.length;
  }
  return expect == values.size();
}

namespace {

struct Tap {
  int index;
  double weight;
};

// For each output cell, the input cells it overlaps and the overlap fraction
// normalized by the cell span.
std::vector<std::vector<Tap>> pooling_taps(int in, int out) {
  std::vector<std::vector<Tap>> taps(out);
  const double span = static_cast<double>(in) / out;
  for (int j = 0; j < out; ++j) {
    const double lo = j * span;
    const double hi = (j + 1) * span;
    const int first = static_cast<int>(std::floor(lo));
    const int last = std::min(in - 1, static_cast<int>(std::ceil(hi)) - 1);
    for (int c = first; c <= last; ++c) {
      const double overlap = std::min(hi, c + 1.0) - std::max(lo, static_cast<double>(c));
      if (overlap > 0.0) taps[j].push_back(Tap{c, overlap / span});
    }
  }
  return taps;
}

}  // namespace

GrayImage avg_pool_resize(const GrayImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw_validation("resize target must be at least 1x1");
  if (out_w == img.width && out_h == img.height) return img;
  const auto xt = pooling_taps(img.width, out_w);
  const auto yt = pooling_taps(img.height, out_h);

  GrayImage rows(out_w, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int j = 0; j < out_w; ++j) {
      // Offsets from the first tap keep constant inputs exactly constant.
      const double base = img.at(xt[j].front().index, y);
      double acc = 0.0;
      for (const auto& t : xt[j]) acc += t.weight * (img.at(t.index, y) - base);
      rows.at(j, y) = base + acc;
    }
  }
  GrayImage out(out_w, out_h);
  for (int i = 0; i < out_h; ++i) {
    for (int j = 0; j < out_w; ++j) {
      const double base = rows.at(j, yt[i].front().index);
      double acc = 0.0;
      for (const auto& t : yt[i]) acc += t.weight * (rows.at(j, t.index) - base);
      out.at(j, i) = base + acc;
    }
  }
  return out;
}

RegionSet crop_regions(const GrayImage& face) {
  if (face.width < 3 || face.height < 3) throw_validation("face image must be at least 3x3");
  const int third = face.height / 3;
  RegionSet r;
  r.eyes = avg_pool_resize(crop(face, 0, 0, face.width, third), kEyesWidth, kEyesHeight);
  r.face = avg_pool_resize(face, kFaceSize, kFaceSize);
  r.mouth = avg_pool_resize(crop(face, 0, face.height - third, face.width, third), kMouthWidth,
                            kMouthHeight);
  return r;
}

std::uint8_t lbp_code(const LbpWindow& window) {
  const double center = window[4];
  unsigned code = 0;
  for (int i = 0; i < 8; ++i) {
    if (window[kLbpNeighborIndex[i]] - center >= 0.0) code |= 1u << i;
  }
  return static_cast<std::uint8_t>(code);
}

FeatureDescriptor lbp_histogram(const GrayImage& img, int grid_w, int grid_h) {
  if (img.width < 3 || img.height < 3) throw_validation("LBP needs an image of at least 3x3");
  if (grid_w < 1 || grid_h < 1) throw_validation("LBP grid must be at least 1x1");
  const int iw = img.width - 2;
  const int ih = img.height - 2;
  const int cw = iw / grid_w;
  const int ch = ih / grid_h;

  FeatureDescriptor out;
  std::vector<double> hist(256);
  for (int gy = 0; gy < grid_h; ++gy) {
    const int y0 = gy * ch;
    const int y1 = gy == grid_h - 1 ? ih : y0 + ch;
    for (int gx = 0; gx < grid_w; ++gx) {
      const int x0 = gx * cw;
      const int x1 = gx == grid_w - 1 ? iw : x0 + cw;
      std::fill(hist.begin(), hist.end(), 0.0);
      std::size_t count = 0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          // interior coordinates are offset by one from image coordinates
          LbpWindow w;
          for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) w[dy * 3 + dx] = img.at(x + dx, y + dy);
          hist[lbp_code(w)] += 1.0;
          ++count;
        }
      }
      if (count > 0) {
        for (double& h : hist) h /= static_cast<double>(count);
      }
      out.append("lbp.cell" + std::to_string(gy) + "_" + std::to_string(gx), hist);
    }
  }
  return out;
}

GradientField gradients(const GrayImage& img) {
  if (img.width < 3 || img.height < 3) throw_validation("gradients need an image of at least 3x3");
  GradientField g{img.width, img.height, std::vector<double>(img.size()), std::vector<double>(img.size())};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
      g.gx[i] = img.clamped(x + 1, y) - img.clamped(x - 1, y);
      g.gy[i] = img.clamped(x, y + 1) - img.clamped(x, y - 1);
    }
  }
  return g;
}

double gradient_magnitude(double gx, double gy) { return std::sqrt(gx * gx + gy * gy); }

double gradient_orientation(double gx, double gy) {
  double theta = std::atan2(gy, gx);
  if (theta < 0.0) theta += std::numbers::pi;
  if (theta >= std::numbers::pi) theta -= std::numbers::pi;
  return theta;
}

FeatureDescriptor hog_descriptor(const GrayImage& img, int cell, int bins) {
  if (cell < 1 || bins < 2) throw_validation("HOG needs cell >= 1 and bins >= 2");
  if (img.width < cell || img.height < cell) throw_validation("image smaller than one HOG cell");
  const GradientField g = gradients(img);
  const int cells_x = img.width / cell;
  const int cells_y = img.height / cell;
  const double bin_width = std::numbers::pi / bins;

  std::vector<double> hist(static_cast<std::size_t>(cells_x) * cells_y * bins, 0.0);
  for (int y = 0; y < cells_y * cell; ++y) {
    for (int x = 0; x < cells_x * cell; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
      if (g.gx[i] == 0.0 && g.gy[i] == 0.0) continue;
      const double q = gradient_magnitude(g.gx[i], g.gy[i]);
      const double pos = gradient_orientation(g.gx[i], g.gy[i]) / bin_width - 0.5;
      const double fl = std::floor(pos);
      const double frac = pos - fl;
      const int b0 = (static_cast<int>(fl) + bins) % bins;
      const int b1 = (b0 + 1) % bins;
      double* h = &hist[(static_cast<std::size_t>(y / cell) * cells_x + x / cell) * bins];
      h[b0] += (1.0 - frac) * q;
      h[b1] += frac * q;
    }
  }

  // Images one cell wide or tall get a single block spanning what exists.
  const int bx = std::min(2, cells_x);
  const int by = std::min(2, cells_y);
  constexpr double kEpsilon = 1e-6;
  FeatureDescriptor out;
  std::vector<double> block(static_cast<std::size_t>(bx) * by * bins);
  for (int cy = 0; cy + by <= cells_y; ++cy) {
    for (int cx = 0; cx + bx <= cells_x; ++cx) {
      std::size_t k = 0;
      for (int dy = 0; dy < by; ++dy)
        for (int dx = 0; dx < bx; ++dx)
          for (int b = 0; b < bins; ++b)
            block[k++] = hist[(static_cast<std::size_t>(cy + dy) * cells_x + cx + dx) * bins + b];
      double sq = 0.0;
      for (double v : block) sq += v * v;
      const double norm = std::sqrt(sq + kEpsilon * kEpsilon);
      for (double& v : block) v /= norm;
      out.append("hog.block" + std::to_string(cy) + "_" + std::to_string(cx), block);
    }
  }
  return out;
}

namespace {

std::size_t hog_length(int w, int h, int cell, int bins) {
  const int cx = w / cell;
  const int cy = h / cell;
  const int bx = std::min(2, cx);
  const int by = std::min(2, cy);
  return static_cast<std::size_t>(cx - bx + 1) * (cy - by + 1) * bx * by * bins;
}

void check_config(const DescriptorConfig& cfg) {
  static const std::vector<std::string> kOrder{"eyes", "face", "mouth"};
  if (cfg.region_order != kOrder) throw_validation("descriptor region order is fixed to eyes,face,mouth");
  if (cfg.lbp_grid_w_strip < 1 || cfg.lbp_grid_h_strip < 1 || cfg.lbp_grid_face < 1) {
    throw_validation("LBP grid must be at least 1x1");
  }
  if (cfg.hog_cell < 1 || cfg.hog_bins < 2) throw_validation("HOG needs cell >= 1 and bins >= 2");
}

FeatureDescriptor flatten_as(const std::string& name, const FeatureDescriptor& d) {
  FeatureDescriptor out;
  out.append(name, d.values);
  return out;
}

}  // namespace

FeatureDescriptor handcrafted_descriptor(const RegionSet& regions, const DescriptorConfig& cfg) {
  check_config(cfg);
  FeatureDescriptor out;
  auto add = [&](const std::string& region, const GrayImage& img, int gw, int gh) {
    out.append("", flatten_as(region + ".lbp", lbp_histogram(img, gw, gh)));
    out.append("", flatten_as(region + ".hog", hog_descriptor(img, cfg.hog_cell, cfg.hog_bins)));
  };
  add("eyes", regions.eyes, cfg.lbp_grid_w_strip, cfg.lbp_grid_h_strip);
  add("face", regions.face, cfg.lbp_grid_face, cfg.lbp_grid_face);
  add("mouth", regions.mouth, cfg.lbp_grid_w_strip, cfg.lbp_grid_h_strip);
  return out;
}

std::size_t handcrafted_length(const DescriptorConfig& cfg) {
  check_config(cfg);
  const std::size_t strip_lbp = static_cast<std::size_t>(cfg.lbp_grid_w_strip) * cfg.lbp_grid_h_strip * 256;
  const std::size_t face_lbp = static_cast<std::size_t>(cfg.lbp_grid_face) * cfg.lbp_grid_face * 256;
  return 2 * strip_lbp + face_lbp +
         hog_length(kEyesWidth, kEyesHeight, cfg.hog_cell, cfg.hog_bins) +
         hog_length(kFaceSize, kFaceSize, cfg.hog_cell, cfg.hog_bins) +
         hog_length(kMouthWidth, kMouthHeight, cfg.hog_cell, cfg.hog_bins);
}

}  // namespace mfer
