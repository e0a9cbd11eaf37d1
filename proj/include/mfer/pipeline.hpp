#pragma once

#include <span>
#include <vector>

#include "mfer/dataset.hpp"
#include "mfer/features.hpp"
#include "mfer/network.hpp"
#include "mfer/preprocess.hpp"

namespace mfer {

/// Side of the stored, preprocessed images.
inline constexpr int kStoredSize = 48;
/// Side of the crops the network sees.
inline constexpr int kCropSize = 42;

/// Enhancement then bilinear resize to kStoredSize x kStoredSize.
GrayImage prepare_image(const GrayImage& raw, const HomomorphicParams& p);

/// Per-image normalization followed by the training-set per-pixel statistics.
GrayImage normalize_for_model(const GrayImage& stored, const PixelStats& stats);

/// Per-image normalization of a whole set, then per-pixel statistics fit on it.
PixelStats fit_normalization(std::span<const GrayImage> stored_train, double epsilon = 1e-6);

/// Turns 42x42 crops into a network input batch. cnn-fusion feeds the pixels;
/// mlp-handcrafted feeds the region LBP/HOG descriptor of each crop.
Tensor encode_batch(const Arch& arch, std::span<const GrayImage> crops);

/// Input width a profile needs (descriptor length for mlp-handcrafted).
int handcrafted_input_dim();

/// Builds the architecture named by `profile` ("cnn-fusion" or "mlp-handcrafted").
Arch make_arch(const std::string& profile, int num_classes, double dropout_p);

/// Center 42x42 crop of a 48x48 image.
GrayImage center_crop(const GrayImage& stored);

}  // namespace mfer
