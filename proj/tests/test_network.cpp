#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mfer/error.hpp"
#include "mfer/network.hpp"
#include "oracles.hpp"

using namespace mfer;

namespace {

// Direct-summation valid convolution, no im2col.
std::vector<double> naive_conv(const layers::ConvDims& d, const Tensor& w, const Tensor& b,
                               const std::vector<double>& x) {
  std::vector<double> y(static_cast<std::size_t>(d.out_c * d.out_h() * d.out_w()));
  for (int oc = 0; oc < d.out_c; ++oc) {
    for (int oy = 0; oy < d.out_h(); ++oy) {
      for (int ox = 0; ox < d.out_w(); ++ox) {
        double s = b.data[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < d.in_c; ++ic) {
          for (int ky = 0; ky < d.filter; ++ky) {
            for (int kx = 0; kx < d.filter; ++kx) {
              s += w.data[static_cast<std::size_t>(((oc * d.in_c + ic) * d.filter + ky) * d.filter + kx)] *
                   x[static_cast<std::size_t>((ic * d.in_h + oy + ky) * d.in_w + ox + kx)];
            }
          }
        }
        y[static_cast<std::size_t>((oc * d.out_h() + oy) * d.out_w() + ox)] = s;
      }
    }
  }
  return y;
}

double dotv(const std::vector<double>& a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor random_batch(const Arch& arch, int n, Rng& rng) {
  std::vector<int> shape{n};
  shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
  return oracle::random_tensor(shape, rng);
}

}  // namespace

TEST_CASE("cnn-fusion plan has the documented shapes") {
  const Arch a = cnn_fusion_arch(7);
  const NetworkPlan p = build_plan(a);
  REQUIRE(p.branches.size() == 3);
  CHECK(p.branches[0].in_shape == std::vector<int>{1, 14, 42});
  CHECK(p.branches[1].in_shape == std::vector<int>{1, 42, 42});
  CHECK(p.branches[2].in_shape == std::vector<int>{1, 14, 42});
  // face: 42 -> conv 40 -> pool 20 -> conv 18 -> pool 9
  CHECK(p.branches[1].layers[6].in_shape == std::vector<int>{32, 9, 9});
  // eyes: 14x42 -> 12x40 -> 6x20 -> 4x18 -> 2x9
  CHECK(p.branches[0].layers[6].in_shape == std::vector<int>{32, 2, 9});
  CHECK(p.fusion[0].concat_left == 128);
  CHECK(p.fusion[0].concat_right == 128);
  CHECK(p.fusion[1].in_shape == std::vector<int>{256});
  CHECK(p.feature_dim == 128);
  CHECK(p.head.out_shape == std::vector<int>{7});
  CHECK(p.params.front().name == "eyes.0.weight");
  CHECK(p.params.front().fan_in == 9);
}

TEST_CASE("arch descriptors round-trip") {
  const Arch a = cnn_fusion_arch(5);
  CHECK(parse_arch(a.descriptor) == a);
  const Arch m = mlp_handcrafted_arch(100, 4, 32, 0.25);
  CHECK(parse_arch(m.descriptor) == m);
  CHECK_THROWS_AS(parse_arch("resnet input=3"), ValidationError);
  CHECK_THROWS_AS(parse_arch("cnn-fusion input=42 classes=x"), ValidationError);
  CHECK_THROWS_AS(cnn_fusion_arch(1), ValidationError);
}

TEST_CASE("too-small inputs are rejected when planning") {
  CnnFusionOptions o;
  o.input_size = 12;
  CHECK_THROWS_AS(build_plan(cnn_fusion_arch(3, o)), ValidationError);
}

TEST_CASE("He initialization") {
  CHECK(he_std(800) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK_THROWS_AS(he_std(0), ValidationError);
  const ModelState m = init_model(mlp_handcrafted_arch(800, 3, 64), 9);
  const Tensor& w = m.params[0];
  REQUIRE(w.size() == 64 * 800);
  const double mean = std::accumulate(w.data.begin(), w.data.end(), 0.0) / w.size();
  double var = 0.0;
  for (double v : w.data) var += (v - mean) * (v - mean);
  CHECK(std::sqrt(var / w.size()) == doctest::Approx(0.05).epsilon(0.05));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (!m.plan.params[i].is_bias) continue;
    for (double v : m.params[i].data) CHECK(v == 0.0);
  }
  CHECK(init_model(m.arch, 9).params == m.params);
  CHECK(init_model(m.arch, 10).params != m.params);
}

TEST_CASE("conv2d matches direct summation") {
  Rng rng(3);
  const layers::ConvDims d{2, 7, 6, 3, 4};
  const Tensor w = oracle::random_tensor({4, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  std::vector<double> x(2 * 7 * 6);
  for (double& v : x) v = rng.normal();
  std::vector<double> y(static_cast<std::size_t>(4 * 5 * 4));
  layers::conv2d_forward(d, w, b, x, y);
  const auto ref = naive_conv(d, w, b, x);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv2d and dense backward match finite differences") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const layers::ConvDims d{2, 6, 5, 3, 3};
    Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    const Tensor b = oracle::random_tensor({3}, rng);
    std::vector<double> x(60);
    for (double& v : x) v = rng.normal();
    std::vector<double> r(static_cast<std::size_t>(3 * 4 * 3));
    for (double& v : r) v = rng.normal();
    Tensor dw({3, 2, 3, 3});
    Tensor db({3});
    std::vector<double> dx(x.size());
    layers::conv2d_backward(d, w, x, r, dw, db, dx);
    const auto fx = [&](const std::vector<double>& xx) { return dotv(r, naive_conv(d, w, b, xx)); };
    const auto nx = oracle::numeric_gradient(fx, x);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(oracle::relative_error(dx[i], nx[i]) < 1e-6);
    const auto fw = [&](const std::vector<double>& ww) {
      return dotv(r, naive_conv(d, Tensor(w.shape, ww), b, x));
    };
    const auto nw = oracle::numeric_gradient(fw, w.data);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(oracle::relative_error(dw.data[i], nw[i]) < 1e-6);
    double rsum0 = 0.0;
    for (int p = 0; p < 12; ++p) rsum0 += r[static_cast<std::size_t>(p)];
    CHECK(db.data[0] == doctest::Approx(rsum0).epsilon(1e-12));
  }

  const Tensor w = oracle::random_tensor({4, 5}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  std::vector<double> x(5);
  for (double& v : x) v = rng.normal();
  std::vector<double> r{0.3, -1.0, 2.0, 0.5};
  Tensor dw({4, 5});
  Tensor db({4});
  std::vector<double> dx(5);
  layers::dense_backward(w, x, r, dw, db, dx);
  const auto f = [&](const std::vector<double>& xx) {
    std::vector<double> y(4);
    layers::dense_forward(w, b, xx, y);
    return dotv(r, y);
  };
  const auto nx = oracle::numeric_gradient(f, x);
  for (std::size_t i = 0; i < 5; ++i) CHECK(oracle::relative_error(dx[i], nx[i]) < 1e-7);
  for (int o = 0; o < 4; ++o) {
    for (int i = 0; i < 5; ++i) CHECK(dw.data[static_cast<std::size_t>(o * 5 + i)] == doctest::Approx(r[o] * x[i]));
  }
  CHECK(db.data == r);
}

TEST_CASE("maxpool2 keeps the first maximum and routes gradients to it") {
  const std::vector<double> img{1, 5, 2, 0,   //
                                3, 5, 9, 9,   //
                                7, 1, 1, 1,   //
                                0, 0, 0, 4};
  std::vector<double> y(4);
  std::vector<std::uint32_t> arg;
  layers::maxpool2_forward(1, 4, 4, img, y, arg);
  CHECK(y == std::vector<double>{5, 9, 7, 4});
  CHECK(arg == std::vector<std::uint32_t>{1, 6, 8, 15});
  std::vector<double> dx(16);
  layers::maxpool2_backward(arg, std::vector<double>{1, 2, 3, 4}, dx);
  CHECK(dx[1] == 1);
  CHECK(dx[6] == 2);
  CHECK(dx[7] == 0);
  CHECK(std::accumulate(dx.begin(), dx.end(), 0.0) == 10);

  // Odd extents drop the trailing row and column.
  const std::vector<double> odd{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> y1(1);
  layers::maxpool2_forward(1, 3, 3, odd, y1, arg);
  CHECK(y1[0] == 5);
}

TEST_CASE("inverted dropout scales kept units") {
  Rng rng(5);
  std::vector<double> x(20000, 1.0);
  std::vector<double> y(x.size());
  std::vector<double> mask;
  layers::dropout_forward(0.5, rng, x, y, mask);
  int kept = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK((y[i] == 0.0 || y[i] == 2.0));
    kept += y[i] != 0.0;
  }
  CHECK(kept > 9700);
  CHECK(kept < 10300);
  std::vector<double> dx(x.size());
  layers::dropout_backward(mask, x, dx);
  CHECK(dx == y);
}

TEST_CASE("whole-network gradients match finite differences") {
  Rng rng(11);
  for (const Arch& arch : {oracle::tiny_cnn_arch(3), mlp_handcrafted_arch(12, 3, 7, 0.5)}) {
    for (int trial = 0; trial < 3; ++trial) {
      const ModelState m = init_model(arch, 100 + trial);
      const Tensor batch = random_batch(arch, 3, rng);
      const Tensor r = oracle::random_tensor({3, arch.num_classes}, rng);
      const Tensor s = oracle::random_tensor({3, m.feature_dim()}, rng);
      const auto objective = [&](const Tensor& logits, const Tensor& feats) {
        return dotv(r.data, logits.data) + dotv(s.data, feats.data);
      };
      Rng dr(77);
      const auto fr = forward(m, batch, Mode::train, &dr);
      const auto grads = backward(m, fr.cache, r, s);
      Rng pick(trial);
      const auto rep = oracle::check_parameter_gradients(m, batch, 77, objective, grads, 40, pick);
      CHECK(rep.checked == 40);
      CHECK(rep.max_rel_error < 1e-5);
    }
  }
}

TEST_CASE("worker count never changes forward or backward results") {
  const Arch arch = oracle::tiny_cnn_arch(4);
  const ModelState m = init_model(arch, 1);
  Rng rng(2);
  const Tensor batch = random_batch(arch, 37, rng);
  const Tensor r = oracle::random_tensor({37, 4}, rng);
  const Tensor s = oracle::random_tensor({37, m.feature_dim()}, rng);
  Rng a(9);
  Rng b(9);
  const auto f1 = forward(m, batch, Mode::train, &a, 1);
  const auto f3 = forward(m, batch, Mode::train, &b, 3);
  CHECK(f1.logits == f3.logits);
  CHECK(f1.features == f3.features);
  CHECK(backward(m, f1.cache, r, s, 1) == backward(m, f3.cache, r, s, 4));
}

TEST_CASE("backward rejects stale or eval caches") {
  const Arch arch = oracle::tiny_cnn_arch(3);
  ModelState m = init_model(arch, 1);
  Rng rng(2);
  const Tensor batch = random_batch(arch, 2, rng);
  const Tensor r({2, 3});
  const Tensor s({2, m.feature_dim()});
  const auto ev = forward(m, batch, Mode::eval);
  CHECK_THROWS_AS(backward(m, ev.cache, r, s), ValidationError);
  const auto tr = forward(m, batch, Mode::train, &rng);
  ++m.generation;
  CHECK_THROWS_AS(backward(m, tr.cache, r, s), ValidationError);
  CHECK_THROWS_AS(forward(m, batch, Mode::train, nullptr), ValidationError);
  CHECK_THROWS_AS(forward(m, Tensor({2, 1, 29, 30}), Mode::eval), ValidationError);
}

TEST_CASE("eval mode is deterministic and dropout-free") {
  const Arch arch = oracle::tiny_cnn_arch(3, 0.9);
  const ModelState m = init_model(arch, 4);
  Rng rng(8);
  const Tensor batch = random_batch(arch, 4, rng);
  const auto a = forward(m, batch, Mode::eval);
  const auto b = forward(m, batch, Mode::eval);
  CHECK(a.logits == b.logits);
  // Without dropout the head is a plain dense layer on the features.
  const auto [wi, bi] = m.head_params();
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 3; ++c) {
      double z = m.params[static_cast<std::size_t>(bi)].data[static_cast<std::size_t>(c)];
      for (int k = 0; k < m.feature_dim(); ++k) {
        z += m.params[static_cast<std::size_t>(wi)].data[static_cast<std::size_t>(c * m.feature_dim() + k)] *
             a.features.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(k)];
      }
      CHECK(a.logits.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(c)] == doctest::Approx(z));
    }
  }
}

TEST_CASE("softmax") {
  const Tensor z({2, 3}, std::vector<double>{1000.0, 1000.0, 1000.0, 0.0, std::log(2.0), std::log(3.0)});
  const Tensor p = softmax(z);
  for (int k = 0; k < 3; ++k) CHECK(p.data[static_cast<std::size_t>(k)] == doctest::Approx(1.0 / 3.0));
  CHECK(p.data[3] == doctest::Approx(1.0 / 6.0));
  CHECK(p.data[5] == doctest::Approx(0.5));
}

TEST_CASE("parallel_for propagates exceptions") {
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw ValidationError("boom");
                               }),
                  ValidationError);
}
