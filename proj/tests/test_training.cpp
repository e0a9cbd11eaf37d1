#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "mfer/dataset.hpp"
#include "mfer/error.hpp"
#include "mfer/evaluation.hpp"
#include "mfer/pipeline.hpp"
#include "mfer/training.hpp"
#include "oracles.hpp"

using namespace mfer;

namespace {

Arch small_arch(int classes, double dropout = 0.5) {
  CnnFusionOptions o;
  o.conv1_channels = 4;
  o.conv2_channels = 8;
  o.branch_units = 32;
  o.fusion_units = 32;
  o.dropout_p = dropout;
  return cnn_fusion_arch(classes, o);
}

std::vector<LabeledSample> model_ready(int classes, int per_class, std::uint64_t seed) {
  auto corpus = generate_synthetic(classes, per_class, kStoredSize, seed);
  std::vector<GrayImage> stored;
  for (const auto& s : corpus) stored.push_back(s.image);
  const PixelStats stats = fit_normalization(stored);
  for (auto& s : corpus) s.image = normalize_for_model(s.image, stats);
  return corpus;
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 0.003;
  cfg.max_epochs = epochs;
  cfg.seed = 7;
  return cfg;
}

double train_accuracy(const ModelState& m, const std::vector<LabeledSample>& samples) {
  std::vector<GrayImage> images;
  for (const auto& s : samples) images.push_back(s.image);
  const auto preds = multicrop_predict(m, images);
  int hit = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) hit += preds[i].label == samples[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

double ce_of_logits(const std::vector<double>& z, int label) {
  Tensor logits({1, static_cast<int>(z.size())}, z);
  const std::vector<int> y{label};
  return cross_entropy(softmax(logits), one_hot(y, static_cast<int>(z.size())));
}

}  // namespace

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.batch_size == 256);
  CHECK(cfg.momentum == 0.9);
  CHECK(cfg.lr == 0.01);
  CHECK(cfg.lr_drop_factor == 10.0);
  CHECK(cfg.max_epochs == 1400);
  CHECK(cfg.dropout_p == 0.5);
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.momentum = 1.0; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lr = 0.0; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lr_drop_factor = 1.0; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lambda_center = -0.1; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.alpha_center = 0.0; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.alpha_center = 1.5; }).validate(), ValidationError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.max_epochs = 0; }).validate(), ValidationError);
  CHECK_NOTHROW(bad([](TrainConfig& c) { c.max_epochs = 0; }).validate(true));
}

TEST_CASE("cross_entropy closed forms") {
  const std::vector<int> y{2};
  const Tensor target = one_hot(y, 7);
  CHECK(cross_entropy(Tensor({1, 7}, std::vector<double>(7, 1.0 / 7.0)), target) == doctest::Approx(std::log(7.0)));
  CHECK(cross_entropy(target, target) == 0.0);
  const std::vector<int> y0{0};
  CHECK(cross_entropy(Tensor({1, 2}, {0.5, 0.5}), one_hot(y0, 2)) == doctest::Approx(std::log(2.0)));
  // The log clamp keeps a zero probability finite.
  CHECK(cross_entropy(Tensor({1, 2}, {0.0, 1.0}), one_hot(y0, 2)) == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(cross_entropy(Tensor({1, 3}), target), ValidationError);
  CHECK_THROWS_AS(one_hot(std::vector<int>{3}, 3), ValidationError);
}

TEST_CASE("fused cross-entropy gradient matches finite differences") {
  Rng rng(51);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> z(7);
    for (double& v : z) v = rng.normal(0.0, 2.0);
    const int label = static_cast<int>(rng.below(7));
    const auto numeric = oracle::numeric_gradient([&](const std::vector<double>& x) { return ce_of_logits(x, label); },
                                                  z, 1e-5);
    const Tensor probs = softmax(Tensor({1, 7}, z));
    const Tensor g = cross_entropy_grad(probs, one_hot(std::vector<int>{label}, 7));
    for (std::size_t k = 0; k < 7; ++k) CHECK(oracle::relative_error(g.data[k], numeric[k]) < 1e-6);
  }
  // Batch mean: rows scale by 1/N.
  const Tensor probs({2, 2}, {0.25, 0.75, 0.5, 0.5});
  const Tensor g = cross_entropy_grad(probs, one_hot(std::vector<int>{1, 0}, 2));
  CHECK(g.data == std::vector<double>{0.125, -0.125, -0.25, 0.25});
}

TEST_CASE("center_loss") {
  const Tensor centers({2, 2}, {0.0, 0.0, 1.0, 1.0});
  const std::vector<int> zero{0};
  const auto one = center_loss(Tensor({1, 2}, {1.0, 0.0}), zero, centers);
  CHECK(one.loss == 0.5);
  CHECK(one.dfeatures.data == std::vector<double>{1.0, 0.0});
  const std::vector<int> both{0, 1};
  CHECK(center_loss(Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0}), both, centers).loss == 0.0);
  CHECK_THROWS_AS(center_loss(Tensor({1, 3}), zero, centers), ValidationError);
  CHECK_THROWS_AS(center_loss(Tensor({1, 2}), std::vector<int>{2}, centers), ValidationError);

  Rng rng(52);
  const Tensor c = oracle::random_tensor({3, 4}, rng);
  const std::vector<int> labels{0, 2, 2, 1, 0};
  std::vector<double> x0(20);
  for (double& v : x0) v = rng.normal(0.0, 1.0);
  const auto analytic = center_loss(Tensor({5, 4}, x0), labels, c);
  const auto numeric = oracle::numeric_gradient(
      [&](const std::vector<double>& x) { return center_loss(Tensor({5, 4}, x), labels, c).loss; }, x0, 1e-4);
  for (std::size_t k = 0; k < x0.size(); ++k) CHECK(oracle::relative_error(analytic.dfeatures.data[k], numeric[k]) < 1e-6);
}

TEST_CASE("update_centers") {
  Tensor centers({3, 2}, {0.0, 0.0, 4.0, 4.0, 9.0, 9.0});
  const std::vector<int> labels{1};
  update_centers(centers, Tensor({1, 2}, {2.0, 0.0}), labels, 1.0);
  // One sample, alpha 1: the center moves halfway to it.
  CHECK(centers.data == std::vector<double>{0.0, 0.0, 3.0, 2.0, 9.0, 9.0});

  Tensor fixed({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor before = fixed;
  update_centers(fixed, Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}), std::vector<int>{0, 1}, 0.5);
  CHECK(fixed.data == before.data);

  // Centers move toward their class mean and never away from it.
  Rng rng(53);
  for (int t = 0; t < 200; ++t) {
    Tensor c = oracle::random_tensor({3, 4}, rng, 3.0);
    const Tensor x = oracle::random_tensor({6, 4}, rng);
    std::vector<int> y(6);
    for (int& v : y) v = static_cast<int>(rng.below(3));
    const double alpha = rng.uniform(0.01, 1.0);
    const Tensor old = c;
    update_centers(c, x, y, alpha);
    for (int j = 0; j < 3; ++j) {
      std::vector<double> mean(4, 0.0);
      int n = 0;
      for (int i = 0; i < 6; ++i) {
        if (y[static_cast<std::size_t>(i)] != j) continue;
        ++n;
        for (int k = 0; k < 4; ++k) mean[static_cast<std::size_t>(k)] += x.data[static_cast<std::size_t>(i * 4 + k)];
      }
      double d_old = 0.0, d_new = 0.0;
      for (int k = 0; k < 4; ++k) {
        const std::size_t idx = static_cast<std::size_t>(j * 4 + k);
        if (n == 0) {
          CHECK(c.data[idx] == old.data[idx]);
          continue;
        }
        const double m = mean[static_cast<std::size_t>(k)] / n;
        d_old += (old.data[idx] - m) * (old.data[idx] - m);
        d_new += (c.data[idx] - m) * (c.data[idx] - m);
      }
      CHECK(d_new <= d_old + 1e-12);
    }
  }
}

TEST_CASE("sgd_momentum_step") {
  std::vector<Tensor> p{Tensor({1}, {0.0})};
  std::vector<Tensor> v{Tensor({1}, {0.0})};
  const std::vector<Tensor> g{Tensor({1}, {1.0})};
  sgd_momentum_step(p, v, g, 0.1, 0.9);
  CHECK(p[0].data[0] == doctest::Approx(-0.1));
  sgd_momentum_step(p, v, g, 0.1, 0.9);
  CHECK(p[0].data[0] == doctest::Approx(-0.29));

  std::vector<Tensor> q{Tensor({2}, {1.0, 2.0})};
  std::vector<Tensor> w{Tensor({2}, {0.5, 0.5})};
  sgd_momentum_step(q, w, std::vector<Tensor>{Tensor({2}, {1.0, -1.0})}, 0.5, 0.0);
  CHECK(q[0].data == std::vector<double>{0.5, 2.5});

  std::vector<Tensor> still{Tensor({2}, {1.0, 2.0})};
  std::vector<Tensor> zero{Tensor({2})};
  sgd_momentum_step(still, zero, std::vector<Tensor>{Tensor({2})}, 0.5, 0.9);
  CHECK(still[0].data == std::vector<double>{1.0, 2.0});

  // Non-finite gradients leave every tensor untouched.
  std::vector<Tensor> a{Tensor({1}, {1.0}), Tensor({1}, {2.0})};
  std::vector<Tensor> av{Tensor({1}), Tensor({1})};
  const std::vector<Tensor> bad{Tensor({1}, {1.0}), Tensor({1}, {NAN})};
  CHECK_THROWS_AS(sgd_momentum_step(a, av, bad, 0.1, 0.9), NumericError);
  CHECK(a[0].data[0] == 1.0);
  CHECK(av[0].data[0] == 0.0);

  // Frozen tensors keep values and momentum.
  const std::vector<bool> mask{false, true};
  const std::vector<Tensor> ok{Tensor({1}, {1.0}), Tensor({1}, {1.0})};
  sgd_momentum_step(a, av, ok, 0.1, 0.9, &mask);
  CHECK(a[0].data[0] == 1.0);
  CHECK(av[0].data[0] == 0.0);
  CHECK(a[1].data[0] == doctest::Approx(1.9));
  CHECK_THROWS_AS(sgd_momentum_step(a, av, std::vector<Tensor>{Tensor({2}), Tensor({1})}, 0.1, 0.9), ValidationError);
}

TEST_CASE("lr_schedule") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.plateau_patience = 3;
  auto log_of = [](const std::vector<double>& losses) {
    TrainLog log;
    for (std::size_t i = 0; i < losses.size(); ++i) log.epochs.push_back({static_cast<int>(i + 1), losses[i]});
    return log;
  };
  CHECK(lr_schedule(log_of({5, 4, 3, 2, 1, 0.5, 0.25}), cfg) == 0.01);
  CHECK(lr_schedule(log_of({1, 1, 1}), cfg) == 0.01);
  CHECK(lr_schedule(log_of({1, 1, 1, 1}), cfg) == doctest::Approx(0.001));
  // Improvements smaller than the threshold count as a plateau.
  CHECK(lr_schedule(log_of({1, 0.99995, 0.99992, 0.99991}), cfg) == doctest::Approx(0.001));
  // Five drops at most.
  std::vector<double> flat(1 + 3 * 5, 1.0);
  CHECK(lr_schedule(log_of(flat), cfg) == doctest::Approx(0.01 / 1e5));
  flat.resize(1 + 3 * 6, 1.0);
  CHECK(lr_schedule(log_of(flat), cfg) == doctest::Approx(0.01 / 1e5));
  flat.resize(1 + 3 * 20, 1.0);
  CHECK(lr_schedule(log_of(flat), cfg) == doctest::Approx(0.01 / 1e5));
}

TEST_CASE("augmentation") {
  Rng rng(54);
  const GrayImage img = oracle::random_image(48, 48, rng);
  for (int t = 0; t < 50; ++t) {
    const auto out = augment(img, rng);
    CHECK(out.width == 42);
    CHECK(out.height == 42);
  }
  AugmentParams identity;
  CHECK(apply_augment(img, identity) == bilinear_resize(img, 42, 42));
  AugmentParams mirrored;
  mirrored.mirror = true;
  CHECK(apply_augment(img, mirrored) == bilinear_resize(mirror_horizontal(img), 42, 42));
  AugmentParams big;
  big.scale = 54;
  big.crop_x = 12;
  big.crop_y = 3;
  CHECK(apply_augment(img, big) == crop(bilinear_resize(img, 54, 54), 12, 3, 42, 42));
  CHECK_THROWS_AS(augment(GrayImage(42, 42), rng), ValidationError);

  int mirrors = 0;
  std::set<int> scales;
  for (int t = 0; t < 10000; ++t) {
    const auto p = draw_augment_params(rng);
    mirrors += p.mirror ? 1 : 0;
    CHECK(p.angle_deg >= -45.0);
    CHECK(p.angle_deg <= 45.0);
    CHECK(p.scale >= 42);
    CHECK(p.scale <= 54);
    CHECK(p.crop_x >= 0);
    CHECK(p.crop_x <= p.scale - 42);
    CHECK(p.crop_y <= p.scale - 42);
    scales.insert(p.scale);
  }
  CHECK(mirrors >= 4800);
  CHECK(mirrors <= 5200);
  CHECK(scales.size() == 13);
}

TEST_CASE("epoch shuffle is a permutation") {
  for (int epoch = 1; epoch <= 5; ++epoch) {
    auto order = epoch_order(37, 3, epoch);
    CHECK(order != epoch_order(37, 3, epoch + 1));
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
  }
  CHECK(epoch_order(37, 3, 2) == epoch_order(37, 3, 2));
}

TEST_CASE("joint-loss gradient is the sum of its parts") {
  Rng rng(55);
  const Arch arch = oracle::tiny_cnn_arch(3);
  ModelState m = init_model(arch, 9);
  m.centers = oracle::random_tensor({3, m.feature_dim()}, rng);
  const Tensor batch = oracle::random_tensor({4, 1, 30, 30}, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  Rng dr(56);
  const auto fr = forward(m, batch, Mode::train, &dr);
  const Tensor dce = cross_entropy_grad(softmax(fr.logits), one_hot(labels, 3));
  const double lambda = 0.37;
  const auto cl = center_loss(fr.features, labels, m.centers);
  Tensor dcenter = cl.dfeatures;
  for (double& v : dcenter.data) v *= lambda;

  const auto joint = backward(m, fr.cache, dce, dcenter);
  const auto only_ce = backward(m, fr.cache, dce, Tensor(fr.features.shape));
  const auto only_center = backward(m, fr.cache, Tensor(fr.logits.shape), cl.dfeatures);
  for (std::size_t t = 0; t < joint.size(); ++t) {
    for (std::size_t k = 0; k < joint[t].size(); ++k) {
      const double sum = only_ce[t].data[k] + lambda * only_center[t].data[k];
      CHECK(std::abs(joint[t].data[k] - sum) <= 1e-12 * (1.0 + std::abs(sum)));
    }
  }
}

TEST_CASE("a small step lowers the loss on a frozen batch") {
  int decreased = 0;
  const int seeds = 40;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(600 + s);
    ModelState m = init_model(oracle::tiny_cnn_arch(3, 0.0), 100 + s);
    const Tensor batch = oracle::random_tensor({6, 1, 30, 30}, rng);
    const std::vector<int> labels{0, 1, 2, 0, 1, 2};
    auto loss_and_grads = [&](std::vector<Tensor>* grads) {
      Rng unused(1);  // dropout is 0, but backward needs a train-mode cache
      const auto fr = forward(m, batch, Mode::train, &unused);
      const Tensor probs = softmax(fr.logits);
      const Tensor y = one_hot(labels, 3);
      const auto cl = center_loss(fr.features, labels, m.centers);
      const double lambda = 0.01;
      if (grads) {
        Tensor df = cl.dfeatures;
        for (double& v : df.data) v *= lambda / 6.0;
        *grads = backward(m, fr.cache, cross_entropy_grad(probs, y), df);
      }
      return cross_entropy(probs, y) + lambda * cl.loss / 6.0;
    };
    std::vector<Tensor> grads;
    const double before = loss_and_grads(&grads);
    sgd_momentum_step(m.params, m.momentum, grads, 1e-3, 0.9);
    ++m.generation;
    const double after = loss_and_grads(nullptr);
    decreased += after < before ? 1 : 0;
  }
  CHECK(decreased >= static_cast<int>(std::ceil(0.95 * seeds)));
}

TEST_CASE("train is deterministic and worker-invariant") {
  const auto samples = model_ready(3, 6, 1);
  const ModelState init = init_model(small_arch(3), 2);
  TrainConfig cfg = quick_config(3);
  const auto a = train(init, samples, cfg);
  const auto b = train(init, samples, cfg);
  cfg.workers = 3;
  const auto c = train(init, samples, cfg);
  REQUIRE(a.log.epochs.size() == 3);
  CHECK(a.status == TrainStatus::max_epochs);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(a.log.epochs[e].epoch == static_cast<int>(e + 1));
    CHECK(a.log.epochs[e].loss == b.log.epochs[e].loss);
    CHECK(a.log.epochs[e].loss == c.log.epochs[e].loss);
    CHECK(a.log.epochs[e].loss == doctest::Approx(a.log.epochs[e].ce + 0.01 * a.log.epochs[e].center));
  }
  for (std::size_t t = 0; t < a.model.params.size(); ++t) {
    CHECK(a.model.params[t].data == b.model.params[t].data);
    CHECK(a.model.params[t].data == c.model.params[t].data);
  }
  CHECK(a.model.centers.data == c.model.centers.data);

  const std::string csv = a.log.to_csv();
  CHECK(csv.rfind("epoch,loss,ce,center,lr,seconds\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("lambda 0 leaves the parameters independent of the centers") {
  const auto samples = model_ready(3, 5, 2);
  ModelState init = init_model(small_arch(3), 3);
  TrainConfig cfg = quick_config(2);
  cfg.lambda_center = 0.0;
  const auto a = train(init, samples, cfg);
  Rng rng(57);
  init.centers = oracle::random_tensor(init.centers.shape, rng, 5.0);
  const auto b = train(init, samples, cfg);
  for (std::size_t t = 0; t < a.model.params.size(); ++t) CHECK(a.model.params[t].data == b.model.params[t].data);
  for (const auto& e : a.log.epochs) CHECK(e.loss == e.ce);
  for (std::size_t e = 0; e < a.log.epochs.size(); ++e) CHECK(a.log.epochs[e].ce == b.log.epochs[e].ce);
}

TEST_CASE("stopping and failure") {
  const auto samples = model_ready(3, 4, 3);
  const ModelState init = init_model(small_arch(3), 4);
  TrainConfig cfg = quick_config(10);
  cfg.loss_epsilon = 100.0;
  int calls = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](const ModelState&, const TrainLog& log) { calls = static_cast<int>(log.epochs.size()); };
  const auto conv = train(init, samples, cfg, hooks);
  CHECK(conv.status == TrainStatus::converged);
  CHECK(conv.log.epochs.size() == 1);
  CHECK(calls == 1);

  // A huge rate blows up; the state of the last completed epoch comes back.
  TrainConfig wild = quick_config(20);
  wild.lr = 1e308;
  wild.batch_size = 2;
  ModelState last = init;
  TrainHooks keep;
  keep.on_epoch = [&](const ModelState& m, const TrainLog&) { last = m; };
  const auto fail = train(init, samples, wild, keep);
  CHECK(fail.status == TrainStatus::numeric_failure);
  CHECK(!fail.message.empty());
  CHECK(fail.log.epochs.size() < 20);
  for (std::size_t t = 0; t < init.params.size(); ++t) CHECK(fail.model.params[t].data == last.params[t].data);
  for (const auto& e : fail.log.epochs) CHECK(std::isfinite(e.loss));

  CHECK_THROWS_AS(train(init, std::vector<LabeledSample>{}, quick_config(1)), ValidationError);
  CHECK(std::string(to_string(TrainStatus::numeric_failure)) == "numeric_failure");
}

TEST_CASE("fine_tune freezes everything but the head") {
  const auto samples = model_ready(4, 8, 4);
  const ModelState init = init_model(small_arch(4), 5);
  TrainConfig cfg = quick_config(40);
  cfg.batch_size = 8;
  const auto trained = train(init, samples, cfg);
  const double acc_before = train_accuracy(trained.model, samples);
  CHECK(acc_before >= 0.9);

  TrainConfig none = quick_config(0);
  const auto same = fine_tune(trained.model, samples, none);
  for (std::size_t t = 0; t < init.params.size(); ++t) CHECK(same.model.params[t].data == trained.model.params[t].data);
  CHECK(same.model.centers.data == trained.model.centers.data);

  TrainConfig ft = quick_config(3);
  ft.seed = 11;
  const auto tuned = fine_tune(trained.model, samples, ft);
  const auto [hw, hb] = trained.model.head_params();
  bool head_moved = false;
  for (std::size_t t = 0; t < init.params.size(); ++t) {
    if (static_cast<int>(t) == hw || static_cast<int>(t) == hb) {
      head_moved = head_moved || tuned.model.params[t].data != trained.model.params[t].data;
    } else {
      CHECK(tuned.model.params[t].data == trained.model.params[t].data);
      CHECK(tuned.model.momentum[t].data == trained.model.momentum[t].data);
    }
  }
  CHECK(head_moved);
  const double acc_after = train_accuracy(tuned.model, samples);
  MESSAGE("train accuracy before ", acc_before, " after fine-tune ", acc_after);
  CHECK(acc_after >= acc_before - 0.02);
}
