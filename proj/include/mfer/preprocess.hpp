#pragma once

#include <span>
#include <vector>

#include "mfer/image.hpp"

namespace mfer {

/// Gains for the illumination (low-pass) and reflectance (high-pass) bands in
/// the log domain. The blur radius scales with the image size.
struct HomomorphicParams {
  double gamma_low = 0.5;
  double gamma_high = 1.5;
  double sigma_frac = 0.125;

  void validate() const;
};

/// Separable Gaussian blur, kernel radius ceil(3*sigma), edge-replicated.
GrayImage gaussian_blur(const GrayImage& img, double sigma);

/// Log-domain band split: L = log(img + 1/255), low = blur(L), out =
/// exp(gamma_low*low + gamma_high*(L - low)), then affinely rescaled to
/// [0,1]. Constant images pass through unchanged.
GrayImage homomorphic_filter(const GrayImage& img, const HomomorphicParams& p);

/// 256-bin histogram equalization. Single-bin images pass through unchanged.
GrayImage hist_equalize(const GrayImage& img);

/// Zero mean, unit population std. Constant images become all zeros.
GrayImage normalize_per_image(const GrayImage& img);

/// Per-pixel mean and population standard deviation over a training set.
struct PixelStats {
  int width = 0;
  int height = 0;
  std::vector<double> mean;
  std::vector<double> std;
  double epsilon = 1e-6;

  bool operator==(const PixelStats&) const = default;
};

PixelStats fit_pixel_stats(std::span<const GrayImage> train, double epsilon = 1e-6);

/// out[p] = (img[p] - mean[p]) / max(std[p], epsilon)
GrayImage apply_pixel_stats(const GrayImage& img, const PixelStats& stats);

/// Enhancement stage: homomorphic filter followed by histogram equalization.
GrayImage enhance(const GrayImage& img, const HomomorphicParams& p);

}  // namespace mfer
