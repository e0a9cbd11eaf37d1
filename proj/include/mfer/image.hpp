#pragma once

#include <cstddef>
#include <vector>

namespace mfer {

/// Grayscale image, row-major, intensities as doubles.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0);
  /// Takes ownership of `values`; throws ValidationError on a size mismatch,
  /// a non-positive extent or a non-finite value.
  GrayImage(int w, int h, std::vector<double> values);

  double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  /// Edge-replicated access; coordinates outside the image clamp to the border.
  double clamped(int x, int y) const;
  std::size_t size() const { return data.size(); }
  bool same_shape(const GrayImage& o) const { return width == o.width && height == o.height; }

  bool operator==(const GrayImage&) const = default;
};

GrayImage mirror_horizontal(const GrayImage& img);
GrayImage transpose(const GrayImage& img);
GrayImage crop(const GrayImage& img, int x0, int y0, int w, int h);

/// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
/// edge-replicated outside the image.
double sample_bilinear(const GrayImage& img, double x, double y);

/// Bilinear resize using half-pixel-center alignment.
GrayImage bilinear_resize(const GrayImage& img, int out_w, int out_h);

/// Rotate about the image center by `degrees` (counter-clockwise on screen),
/// bilinear sampling, edge-replicated fill.
GrayImage rotate(const GrayImage& img, double degrees);

}  // namespace mfer
