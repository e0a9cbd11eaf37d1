#include "mfer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "mfer/error.hpp"
#include "mfer/pipeline.hpp"

namespace mfer {

void TrainConfig::validate(bool allow_zero_epochs) const {
  if (batch_size < 1) throw_validation("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw_validation("momentum must lie in [0,1)");
  if (!(lr > 0.0)) throw_validation("lr must be > 0");
  if (!(lr_drop_factor > 1.0)) throw_validation("lr_drop_factor must be > 1");
  if (plateau_patience < 1) throw_validation("plateau_patience must be >= 1");
  if (max_epochs < (allow_zero_epochs ? 0 : 1)) throw_validation("max_epochs must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw_validation("dropout_p must lie in [0,1)");
  if (!(lambda_center >= 0.0)) throw_validation("lambda_center must be >= 0");
  if (!(alpha_center > 0.0 && alpha_center <= 1.0)) throw_validation("alpha_center must lie in (0,1]");
  if (!(loss_epsilon >= 0.0)) throw_validation("loss_epsilon must be >= 0");
  if (workers < 1) throw_validation("workers must be >= 1");
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,loss,ce,center,lr,seconds\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.loss, e.ce, e.center, e.lr,
                  e.seconds);
    out << buf;
  }
  return out.str();
}

AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.mirror = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-45.0, 45.0);
  p.scale = rng.uniform_int(kCropSize, 54);
  p.crop_x = rng.uniform_int(0, p.scale - kCropSize);
  p.crop_y = rng.uniform_int(0, p.scale - kCropSize);
  return p;
}

GrayImage apply_augment(const GrayImage& img, const AugmentParams& p) {
  if (img.width != kStoredSize || img.height != kStoredSize) {
    throw ValidationError("augment expects a 48x48 image, got " + std::to_string(img.width) + "x" +
                          std::to_string(img.height));
  }
  GrayImage out = p.mirror ? mirror_horizontal(img) : img;
  out = rotate(out, p.angle_deg);
  out = bilinear_resize(out, p.scale, p.scale);
  return crop(out, p.crop_x, p.crop_y, kCropSize, kCropSize);
}

GrayImage augment(const GrayImage& img, Rng& rng) { return apply_augment(img, draw_augment_params(rng)); }

Tensor one_hot(std::span<const int> labels, int num_classes) {
  Tensor t({static_cast<int>(labels.size()), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ValidationError("label out of range");
    t.row(i)[labels[i]] = 1.0;
  }
  return t;
}

double cross_entropy(const Tensor& probs, const Tensor& onehot) {
  if (probs.shape != onehot.shape || probs.rank() != 2) throw ValidationError("cross_entropy: shape mismatch");
  const std::size_t n = static_cast<std::size_t>(probs.shape[0]);
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (onehot.data[i] != 0.0) total += onehot.data[i] * std::log(std::max(probs.data[i], 1e-12));
  }
  return -total / static_cast<double>(n);
}

Tensor cross_entropy_grad(const Tensor& probs, const Tensor& onehot) {
  if (probs.shape != onehot.shape || probs.rank() != 2) throw ValidationError("cross_entropy: shape mismatch");
  Tensor g(probs.shape);
  const double inv_n = 1.0 / std::max(1, probs.shape[0]);
  for (std::size_t i = 0; i < probs.size(); ++i) g.data[i] = (probs.data[i] - onehot.data[i]) * inv_n;
  return g;
}

CenterLoss center_loss(const Tensor& features, std::span<const int> labels, const Tensor& centers) {
  if (features.rank() != 2 || centers.rank() != 2 || features.shape[1] != centers.shape[1] ||
      static_cast<std::size_t>(features.shape[0]) != labels.size()) {
    throw ValidationError("center_loss: shape mismatch");
  }
  CenterLoss r;
  r.dfeatures = Tensor(features.shape);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= centers.shape[0]) throw ValidationError("center_loss: label out of range");
    const auto x = features.row(i);
    const auto c = centers.row(static_cast<std::size_t>(labels[i]));
    auto d = r.dfeatures.row(i);
    for (std::size_t k = 0; k < x.size(); ++k) {
      d[k] = x[k] - c[k];
      r.loss += 0.5 * d[k] * d[k];
    }
  }
  return r;
}

void update_centers(Tensor& centers, const Tensor& features, std::span<const int> labels, double alpha) {
  if (features.rank() != 2 || centers.rank() != 2 || features.shape[1] != centers.shape[1] ||
      static_cast<std::size_t>(features.shape[0]) != labels.size()) {
    throw ValidationError("update_centers: shape mismatch");
  }
  const std::size_t classes = static_cast<std::size_t>(centers.shape[0]);
  const std::size_t d = static_cast<std::size_t>(centers.shape[1]);
  std::vector<double> delta(classes * d, 0.0);
  std::vector<int> count(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto j = static_cast<std::size_t>(labels[i]);
    if (j >= classes) throw ValidationError("update_centers: label out of range");
    ++count[j];
    const auto x = features.row(i);
    const auto c = centers.row(j);
    for (std::size_t k = 0; k < d; ++k) delta[j * d + k] += c[k] - x[k];
  }
  for (std::size_t j = 0; j < classes; ++j) {
    if (count[j] == 0) continue;
    auto c = centers.row(j);
    for (std::size_t k = 0; k < d; ++k) c[k] -= alpha * delta[j * d + k] / (1.0 + count[j]);
  }
}

void sgd_momentum_step(std::span<Tensor> params, std::span<Tensor> momentum, std::span<const Tensor> grads,
                       double lr, double mu, const std::vector<bool>* trainable) {
  if (trainable && trainable->size() != params.size()) throw ValidationError("sgd: trainable mask length");
  const auto active = [&](std::size_t i) { return !trainable || (*trainable)[i]; };
  if (params.size() != momentum.size() || params.size() != grads.size()) {
    throw ValidationError("sgd: parameter, momentum and gradient lists differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape != grads[i].shape || momentum[i].shape != grads[i].shape) {
      throw ValidationError("sgd: shape mismatch at tensor " + std::to_string(i));
    }
    if (active(i) && !all_finite(grads[i])) throw NumericError("sgd: non-finite gradient in tensor " + std::to_string(i));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active(i)) continue;
    auto& p = params[i].data;
    auto& v = momentum[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

double lr_schedule(const TrainLog& log, const TrainConfig& cfg) {
  double lr = cfg.lr;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  int drops = 0;
  for (const auto& e : log.epochs) {
    if (e.loss < best - kPlateauMinDelta) {
      best = e.loss;
      stale = 0;
    } else {
      ++stale;
    }
    if (stale >= cfg.plateau_patience && drops < kMaxLrDrops) {
      lr /= cfg.lr_drop_factor;
      ++drops;
      stale = 0;
    }
  }
  return lr;
}

const char* to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::converged: return "converged";
    case TrainStatus::max_epochs: return "max_epochs";
    case TrainStatus::numeric_failure: return "numeric_failure";
  }
  return "?";
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, Substream::shuffle, static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

namespace {

// Samples per forward/backward pass inside a batch; bounds cache memory.
constexpr std::size_t kPassSize = 32;

struct BatchOutcome {
  double ce_sum = 0.0;
  double center_sum = 0.0;
  std::vector<Tensor> grads;
  Tensor features;
};

BatchOutcome run_batch(const ModelState& m, const Tensor& inputs, std::span<const int> labels, double lambda,
                       Rng& dropout_rng, int workers) {
  const std::size_t n = labels.size();
  BatchOutcome out;
  out.grads = zero_gradients(m);
  out.features = Tensor({static_cast<int>(n), m.feature_dim()});
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t start = 0; start < n; start += kPassSize) {
    const std::size_t len = std::min(kPassSize, n - start);
    std::vector<int> shape = inputs.shape;
    shape[0] = static_cast<int>(len);
    const std::size_t row = inputs.row_size();
    Tensor part(shape, std::vector<double>(inputs.data.begin() + static_cast<std::ptrdiff_t>(start * row),
                                           inputs.data.begin() + static_cast<std::ptrdiff_t>((start + len) * row)));
    const auto part_labels = labels.subspan(start, len);

    ForwardResult fr = forward(m, part, Mode::train, &dropout_rng, workers);
    const Tensor probs = softmax(fr.logits);
    const Tensor targets = one_hot(part_labels, m.num_classes());
    // Per-pass CE is a mean over the pass; rescale to the batch mean.
    out.ce_sum += cross_entropy(probs, targets) * static_cast<double>(len);
    Tensor dlogits(probs.shape);
    for (std::size_t k = 0; k < probs.size(); ++k) dlogits.data[k] = (probs.data[k] - targets.data[k]) * inv_n;

    CenterLoss cl = center_loss(fr.features, part_labels, m.centers);
    out.center_sum += cl.loss;
    for (double& v : cl.dfeatures.data) v *= lambda;

    const auto g = backward(m, fr.cache, dlogits, cl.dfeatures, workers);
    for (std::size_t p = 0; p < g.size(); ++p) {
      for (std::size_t k = 0; k < g[p].size(); ++k) out.grads[p].data[k] += g[p].data[k];
    }
    std::copy(fr.features.data.begin(), fr.features.data.end(),
              out.features.data.begin() + static_cast<std::ptrdiff_t>(start * fr.features.row_size()));
  }
  return out;
}

TrainResult run_training(ModelState model, std::span<const LabeledSample> samples, const TrainConfig& cfg,
                         const std::vector<bool>& trainable, const TrainHooks& hooks, bool allow_zero_epochs) {
  cfg.validate(allow_zero_epochs);
  TrainResult result;
  if (cfg.max_epochs == 0) {
    result.model = std::move(model);
    result.status = TrainStatus::max_epochs;
    return result;
  }
  if (samples.empty()) throw ValidationError("training set is empty");
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= model.num_classes()) throw ValidationError("training label out of range");
  }

  const std::size_t n = samples.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t batches_per_epoch = (n + batch - 1) / batch;
  ModelState last_good = model;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = result.log.epochs.empty() ? cfg.lr : lr_schedule(result.log, cfg);
    const auto order = epoch_order(n, cfg.seed, epoch);
    double ce_total = 0.0;
    double center_total = 0.0;
    bool failed = false;

    for (std::size_t b = 0; b < batches_per_epoch && !failed; ++b) {
      const std::size_t begin = b * batch;
      const std::size_t end = std::min(n, begin + batch);
      const std::size_t len = end - begin;
      std::vector<GrayImage> crops(len);
      std::vector<int> labels(len);
      parallel_for(len, cfg.workers, [&](std::size_t i) {
        const std::size_t idx = order[begin + i];
        Rng rng = Rng::stream(cfg.seed, Substream::augment, static_cast<std::uint64_t>(epoch - 1) * n + idx);
        crops[i] = augment(samples[idx].image, rng);
        labels[i] = samples[idx].label;
      });
      const Tensor inputs = encode_batch(model.arch, crops);
      Rng dropout_rng = Rng::stream(cfg.seed, Substream::dropout,
                                    static_cast<std::uint64_t>(epoch - 1) * batches_per_epoch + b);
      BatchOutcome bo = run_batch(model, inputs, labels, cfg.lambda_center, dropout_rng, cfg.workers);

      const double batch_loss = (bo.ce_sum + cfg.lambda_center * bo.center_sum) / static_cast<double>(len);
      if (!std::isfinite(batch_loss)) {
        failed = true;
        result.message = "non-finite loss in epoch " + std::to_string(epoch);
        break;
      }
      ce_total += bo.ce_sum;
      center_total += bo.center_sum;

      try {
        sgd_momentum_step(model.params, model.momentum, bo.grads, lr, cfg.momentum, &trainable);
      } catch (const NumericError& e) {
        failed = true;
        result.message = std::string(e.what()) + " in epoch " + std::to_string(epoch);
        break;
      }
      update_centers(model.centers, bo.features, labels, cfg.alpha_center);
      ++model.generation;
    }

    if (failed) {
      result.model = std::move(last_good);
      result.status = TrainStatus::numeric_failure;
      return result;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.ce = ce_total / static_cast<double>(n);
    rec.center = center_total / static_cast<double>(n);
    rec.loss = rec.ce + cfg.lambda_center * rec.center;
    rec.lr = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(rec);
    last_good = model;
    if (hooks.on_epoch) hooks.on_epoch(model, result.log);

    if (rec.loss < cfg.loss_epsilon) {
      result.status = TrainStatus::converged;
      break;
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train(ModelState model, std::span<const LabeledSample> samples, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  const std::vector<bool> trainable(model.params.size(), true);
  return run_training(std::move(model), samples, cfg, trainable, hooks, false);
}

TrainResult fine_tune(ModelState model, std::span<const LabeledSample> samples, const TrainConfig& cfg,
                      const TrainHooks& hooks) {
  std::vector<bool> trainable(model.params.size(), false);
  const auto [w, b] = model.head_params();
  trainable[w] = true;
  trainable[b] = true;
  return run_training(std::move(model), samples, cfg, trainable, hooks, true);
}

}  // namespace mfer
