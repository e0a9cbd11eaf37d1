#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mfer/dataset.hpp"
#include "mfer/network.hpp"
#include "mfer/rng.hpp"

namespace mfer {

struct TrainConfig {
  int batch_size = 256;
  double momentum = 0.9;
  double lr = 0.01;
  double lr_drop_factor = 10.0;
  int plateau_patience = 10;
  int max_epochs = 1400;
  double dropout_p = 0.5;
  double lambda_center = 0.01;
  double alpha_center = 0.5;
  double loss_epsilon = 1e-3;
  std::uint64_t seed = 1;
  /// Parallel workers for augmentation and gradients; never changes results.
  int workers = 1;

  /// Throws ValidationError. max_epochs may be 0 only when allow_zero_epochs.
  void validate(bool allow_zero_epochs = false) const;
};

/// Minimum absolute improvement of the best training loss that resets the
/// plateau counter, and the cap on learning-rate drops.
inline constexpr double kPlateauMinDelta = 1e-4;
inline constexpr int kMaxLrDrops = 5;

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;    // mean over samples of ce + lambda * center
  double ce = 0.0;      // mean cross-entropy
  double center = 0.0;  // mean 0.5*||x - c_y||^2
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// `epoch,loss,ce,center,lr,seconds`
  std::string to_csv() const;
};

struct AugmentParams {
  bool mirror = false;
  double angle_deg = 0.0;
  int scale = 42;
  int crop_x = 0;
  int crop_y = 0;
};

/// Draws, in order: mirror with probability 0.5, angle ~ U(-45, 45) degrees,
/// scale ~ U{42..54}, crop offsets ~ U{0..scale-42} (x then y).
AugmentParams draw_augment_params(Rng& rng);

/// Mirror, rotate about the center, bilinear rescale to scale x scale, crop 42x42.
GrayImage apply_augment(const GrayImage& img, const AugmentParams& p);

/// 48x48 in, 42x42 out.
GrayImage augment(const GrayImage& img, Rng& rng);

Tensor one_hot(std::span<const int> labels, int num_classes);

/// -(1/N) sum_i sum_j y_i(j) log(max(p_i(j), 1e-12))
double cross_entropy(const Tensor& probs, const Tensor& onehot);
/// Gradient w.r.t. the logits with softmax fused: (probs - onehot) / N.
Tensor cross_entropy_grad(const Tensor& probs, const Tensor& onehot);

struct CenterLoss {
  double loss = 0.0;  // 0.5 * sum_i ||x_i - c_{y_i}||^2 over the batch
  Tensor dfeatures;   // row i = x_i - c_{y_i}
};
CenterLoss center_loss(const Tensor& features, std::span<const int> labels, const Tensor& centers);

/// For each class j in the batch: c_j -= alpha * sum_{y_i=j}(c_j - x_i) / (1 + n_j).
void update_centers(Tensor& centers, const Tensor& features, std::span<const int> labels, double alpha);

/// Heavy-ball momentum: v = mu*v + g; p -= lr*v. Throws NumericError, without
/// touching anything, if a gradient is non-finite. Tensors whose `trainable`
/// entry is false keep both their values and their momentum.
void sgd_momentum_step(std::span<Tensor> params, std::span<Tensor> momentum, std::span<const Tensor> grads,
                       double lr, double mu, const std::vector<bool>* trainable = nullptr);

/// Replays the log: the rate drops by lr_drop_factor after plateau_patience
/// epochs without a kPlateauMinDelta improvement, at most kMaxLrDrops times.
double lr_schedule(const TrainLog& log, const TrainConfig& cfg);

enum class TrainStatus { converged, max_epochs, numeric_failure };

const char* to_string(TrainStatus s);

struct TrainResult {
  ModelState model;
  TrainLog log;
  TrainStatus status = TrainStatus::max_epochs;
  std::string message;
};

struct TrainHooks {
  /// Called after every completed epoch.
  std::function<void(const ModelState&, const TrainLog&)> on_epoch;
};

/// Mini-batch SGD on cross-entropy + lambda_center * center loss. `samples`
/// are model-ready 48x48 images (per-image and per-pixel normalized). On a
/// non-finite loss the returned model is the last completed epoch's state.
TrainResult train(ModelState model, std::span<const LabeledSample> samples, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// Retrains only the final dense layer (and the centers) on `samples`.
TrainResult fine_tune(ModelState model, std::span<const LabeledSample> samples, const TrainConfig& cfg,
                      const TrainHooks& hooks = {});

/// Epoch permutation of [0, n) used by train.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace mfer
