#include "mfer/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "mfer/error.hpp"

namespace mfer {

namespace {

void require_finite(const GrayImage& img) {
  for (double v : img.data) {
    if (!std::isfinite(v)) throw ValidationError("image contains a non-finite value");
  }
}

std::pair<double, double> min_max(const GrayImage& img) {
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  return {*lo, *hi};
}

}  // namespace

void HomomorphicParams::validate() const {
  if (!(gamma_low >= 0.0) || !(gamma_high >= 0.0)) throw_validation("homomorphic gains must be >= 0");
  if (!(sigma_frac > 0.0 && sigma_frac < 1.0)) throw_validation("sigma_frac must lie in (0,1)");
}

GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  GrayImage tmp(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * img.clamped(x + i, y);
      tmp.at(x, y) = acc;
    }
  }
  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.clamped(x, y + i);
      out.at(x, y) = acc;
    }
  }
  return out;
}

GrayImage homomorphic_filter(const GrayImage& img, const HomomorphicParams& p) {
  require_finite(img);
  p.validate();
  const auto [lo, hi] = min_max(img);
  if (lo == hi) return img;

  constexpr double kOffset = 1.0 / 255.0;
  GrayImage log_img(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) log_img.data[i] = std::log(img.data[i] + kOffset);

  const double sigma = p.sigma_frac * std::min(img.width, img.height);
  const GrayImage low = gaussian_blur(log_img, sigma);

  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double l = low.data[i];
    out.data[i] = std::exp(p.gamma_low * l + p.gamma_high * (log_img.data[i] - l));
  }
  const auto [olo, ohi] = min_max(out);
  if (!(ohi > olo)) return GrayImage(img.width, img.height, 0.0);
  for (double& v : out.data) v = std::clamp((v - olo) / (ohi - olo), 0.0, 1.0);
  return out;
}

GrayImage hist_equalize(const GrayImage& img) {
  std::array<std::size_t, 256> counts{};
  std::vector<int> bins(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    bins[i] = static_cast<int>(std::lround(v * 255.0));
    ++counts[bins[i]];
  }
  const double n = static_cast<double>(img.size());
  std::array<double, 256> cdf{};
  std::size_t running = 0;
  double cdf_min = -1.0;
  for (int b = 0; b < 256; ++b) {
    running += counts[b];
    cdf[b] = running / n;
    if (cdf_min < 0.0 && counts[b] > 0) cdf_min = cdf[b];
  }
  if (cdf_min >= 1.0) return img;

  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.data[i] = std::clamp((cdf[bins[i]] - cdf_min) / (1.0 - cdf_min), 0.0, 1.0);
  }
  return out;
}

GrayImage normalize_per_image(const GrayImage& img) {
  if (img.size() < 2) throw_validation("per-image normalization needs at least 2 pixels");
  constexpr double kEpsilon = 1e-6;
  const double n = static_cast<double>(img.size());
  double mean = 0.0;
  for (double v : img.data) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : img.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);

  GrayImage out(img.width, img.height, 0.0);
  if (sd <= kEpsilon) return out;
  for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = (img.data[i] - mean) / sd;
  return out;
}

PixelStats fit_pixel_stats(std::span<const GrayImage> train, double epsilon) {
  if (train.size() < 2) throw_validation("pixel statistics need at least 2 images");
  if (!(epsilon > 0.0)) throw_validation("pixel statistics epsilon must be positive");
  PixelStats s;
  s.width = train.front().width;
  s.height = train.front().height;
  s.epsilon = epsilon;
  for (const auto& img : train) {
    if (!img.same_shape(train.front())) throw_validation("training images differ in shape");
  }
  const std::size_t n_pix = train.front().size();
  const double n = static_cast<double>(train.size());
  s.mean.assign(n_pix, 0.0);
  s.std.assign(n_pix, 0.0);
  // Accumulate offsets from the first image so identical inputs give exact zeros.
  const auto& ref = train.front().data;
  for (const auto& img : train)
    for (std::size_t p = 0; p < n_pix; ++p) s.mean[p] += img.data[p] - ref[p];
  for (std::size_t p = 0; p < n_pix; ++p) s.mean[p] = ref[p] + s.mean[p] / n;
  for (const auto& img : train) {
    for (std::size_t p = 0; p < n_pix; ++p) {
      const double d = img.data[p] - s.mean[p];
      s.std[p] += d * d;
    }
  }
  for (double& v : s.std) v = std::sqrt(v / n);
  return s;
}

GrayImage apply_pixel_stats(const GrayImage& img, const PixelStats& stats) {
  if (img.width != stats.width || img.height != stats.height) {
    throw_validation("image shape does not match pixel statistics");
  }
  GrayImage out(img.width, img.height);
  for (std::size_t p = 0; p < img.size(); ++p) {
    out.data[p] = (img.data[p] - stats.mean[p]) / std::max(stats.std[p], stats.epsilon);
  }
  return out;
}

GrayImage enhance(const GrayImage& img, const HomomorphicParams& p) {
  return hist_equalize(homomorphic_filter(img, p));
}

}  // namespace mfer
