#include "mfer/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mfer/error.hpp"

namespace mfer {

GrayImage::GrayImage(int w, int h, double fill) : width(w), height(h) {
  if (w < 1 || h < 1) {
    throw_validation("image extents must be positive, got " + std::to_string(w) + "x" +
                     std::to_string(h));
  }
  data.assign(static_cast<std::size_t>(w) * h, fill);
}

GrayImage::GrayImage(int w, int h, std::vector<double> values)
    : width(w), height(h), data(std::move(values)) {
  if (w < 1 || h < 1) {
    throw_validation("image extents must be positive, got " + std::to_string(w) + "x" +
                     std::to_string(h));
  }
  if (data.size() != static_cast<std::size_t>(w) * h) {
    throw_validation("image data length " + std::to_string(data.size()) + " does not match " +
                     std::to_string(w) + "x" + std::to_string(h));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw_validation("image contains a non-finite value");
  }
}

double GrayImage::clamped(int x, int y) const {
  x = std::clamp(x, 0, width - 1);
  y = std::clamp(y, 0, height - 1);
  return at(x, y);
}

GrayImage mirror_horizontal(const GrayImage& img) {
  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
  return out;
}

GrayImage transpose(const GrayImage& img) {
  GrayImage out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.at(y, x) = img.at(x, y);
  return out;
}

GrayImage crop(const GrayImage& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > img.width || y0 + h > img.height) {
    throw_validation("crop rectangle outside the image");
  }
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

double sample_bilinear(const GrayImage& img, double x, double y) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  const double top = (1.0 - ax) * img.clamped(x0, y0) + ax * img.clamped(x0 + 1, y0);
  const double bot = (1.0 - ax) * img.clamped(x0, y0 + 1) + ax * img.clamped(x0 + 1, y0 + 1);
  return (1.0 - ay) * top + ay * bot;
}

GrayImage bilinear_resize(const GrayImage& img, int out_w, int out_h) {
  GrayImage out(out_w, out_h);
  if (out_w == img.width && out_h == img.height) {
    out.data = img.data;
    return out;
  }
  const double sx = static_cast<double>(img.width) / out_w;
  const double sy = static_cast<double>(img.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < out_w; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      out.at(x, y) = sample_bilinear(img, src_x, src_y);
    }
  }
  return out;
}

GrayImage rotate(const GrayImage& img, double degrees) {
  if (degrees == 0.0) return img;
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a);
  const double s = std::sin(a);
  const double cx = (img.width - 1) / 2.0;
  const double cy = (img.height - 1) / 2.0;
  GrayImage out(img.width, img.height);
  // Inverse mapping; y grows downward, so a positive angle turns the content
  // counter-clockwise as displayed.
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const double src_x = c * dx - s * dy + cx;
      const double src_y = s * dx + c * dy + cy;
      out.at(x, y) = sample_bilinear(img, src_x, src_y);
    }
  }
  return out;
}

}  // namespace mfer
