#include "mfer/pipeline.hpp"

#include "mfer/error.hpp"

namespace mfer {

GrayImage prepare_image(const GrayImage& raw, const HomomorphicParams& p) {
  return bilinear_resize(enhance(raw, p), kStoredSize, kStoredSize);
}

GrayImage normalize_for_model(const GrayImage& stored, const PixelStats& stats) {
  return apply_pixel_stats(normalize_per_image(stored), stats);
}

PixelStats fit_normalization(std::span<const GrayImage> stored_train, double epsilon) {
  std::vector<GrayImage> normalized;
  normalized.reserve(stored_train.size());
  for (const auto& img : stored_train) normalized.push_back(normalize_per_image(img));
  return fit_pixel_stats(normalized, epsilon);
}

int handcrafted_input_dim() { return static_cast<int>(handcrafted_length()); }

Arch make_arch(const std::string& profile, int num_classes, double dropout_p) {
  if (profile == "cnn-fusion") {
    CnnFusionOptions o;
    o.input_size = kCropSize;
    o.dropout_p = dropout_p;
    return cnn_fusion_arch(num_classes, o);
  }
  if (profile == "mlp-handcrafted") {
    return mlp_handcrafted_arch(handcrafted_input_dim(), num_classes, 256, dropout_p);
  }
  throw ValidationError("unknown profile '" + profile + "'");
}

Tensor encode_batch(const Arch& arch, std::span<const GrayImage> crops) {
  std::vector<int> shape{static_cast<int>(crops.size())};
  shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
  Tensor batch(shape);
  for (std::size_t i = 0; i < crops.size(); ++i) {
    auto row = batch.row(i);
    if (arch.profile == "mlp-handcrafted") {
      const auto d = handcrafted_descriptor(crop_regions(crops[i]));
      if (d.values.size() != row.size()) throw ValidationError("descriptor length does not match the model input");
      std::copy(d.values.begin(), d.values.end(), row.begin());
    } else {
      if (crops[i].size() != row.size()) {
        throw ValidationError("crop of " + std::to_string(crops[i].width) + "x" + std::to_string(crops[i].height) +
                              " does not match the model input " + shape_string(arch.input_shape));
      }
      std::copy(crops[i].data.begin(), crops[i].data.end(), row.begin());
    }
  }
  return batch;
}

GrayImage center_crop(const GrayImage& stored) {
  const int off_x = (stored.width - kCropSize) / 2;
  const int off_y = (stored.height - kCropSize) / 2;
  return crop(stored, off_x, off_y, kCropSize, kCropSize);
}

}  // namespace mfer
