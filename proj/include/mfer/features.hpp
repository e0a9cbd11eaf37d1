#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfer/image.hpp"

namespace mfer {

/// Region sizes for the handcrafted path (width x height).
inline constexpr int kEyesWidth = 140;
inline constexpr int kEyesHeight = 40;
inline constexpr int kFaceSize = 200;
inline constexpr int kMouthWidth = 140;
inline constexpr int kMouthHeight = 40;

struct RegionSet {
  GrayImage eyes;
  GrayImage face;
  GrayImage mouth;
};

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const Segment&) const = default;
};

/// Flat feature vector with a named, contiguous segment layout.
struct FeatureDescriptor {
  std::vector<double> values;
  std::vector<Segment> layout;

  void append(std::string name, std::span<const double> segment);
  /// Appends every segment of `other`, prefixing names with `prefix`.
  void append(const std::string& prefix, const FeatureDescriptor& other);
  /// Checks that segments tile the vector exactly.
  bool well_formed() const;
};

/// Area-weighted average pooling with fractional coverage at cell borders.
GrayImage avg_pool_resize(const GrayImage& img, int out_w, int out_h);

/// Eyes: top floor(h/3) rows; mouth: bottom floor(h/3) rows; face: whole image.
RegionSet crop_regions(const GrayImage& face);

/// 3x3 window, row-major; index 4 is the center.
using LbpWindow = std::array<double, 9>;

/// Neighbor i (i = 0..7) starts east and runs counter-clockwise as displayed
/// (y grows downward): E, NE, N, NW, W, SW, S, SE. Bit i is set when
/// neighbor >= center.
inline constexpr std::array<int, 8> kLbpNeighborIndex{5, 2, 1, 0, 3, 6, 7, 8};

std::uint8_t lbp_code(const LbpWindow& window);

/// Codes over interior pixels, split into grid_w x grid_h cells (remainder to
/// the last cell), one 256-bin normalized histogram per cell, row-major.
FeatureDescriptor lbp_histogram(const GrayImage& img, int grid_w, int grid_h);

struct GradientField {
  int width = 0;
  int height = 0;
  std::vector<double> gx;
  std::vector<double> gy;
};

/// Central differences with edge replication.
GradientField gradients(const GrayImage& img);

/// Gradient magnitude and unsigned orientation in [0, pi).
double gradient_magnitude(double gx, double gy);
double gradient_orientation(double gx, double gy);

/// Histogram of oriented gradients: cell x cell pixel cells (partial cells
/// dropped), orientation votes linearly interpolated between the two nearest
/// bin centers, 2x2-cell blocks at one-cell stride, L2 block normalization.
FeatureDescriptor hog_descriptor(const GrayImage& img, int cell, int bins);

struct DescriptorConfig {
  int lbp_grid_w_strip = 4;
  int lbp_grid_h_strip = 2;
  int lbp_grid_face = 5;
  int hog_cell = 10;
  int hog_bins = 9;
  /// Must be exactly {eyes, face, mouth}; other orders are rejected.
  std::vector<std::string> region_order{"eyes", "face", "mouth"};
};

/// LBP then HOG for each of eyes, face, mouth, concatenated in that order.
FeatureDescriptor handcrafted_descriptor(const RegionSet& regions, const DescriptorConfig& cfg = {});

/// Length handcrafted_descriptor produces for `cfg`.
std::size_t handcrafted_length(const DescriptorConfig& cfg = {});

}  // namespace mfer
