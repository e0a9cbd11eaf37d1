#include "mfer/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "mfer/error.hpp"
#include "mfer/text.hpp"
#include "mfer/kernels.hpp"

namespace mfer {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

namespace {

std::vector<LayerSpec> conv_branch(const CnnFusionOptions& o) {
  return {LayerSpec::conv2d(3, o.conv1_channels), LayerSpec::relu(), LayerSpec::maxpool2(),
          LayerSpec::conv2d(3, o.conv2_channels), LayerSpec::relu(), LayerSpec::maxpool2(),
          LayerSpec::flatten(),                   LayerSpec::dense(o.branch_units), LayerSpec::relu()};
}

}  // namespace

Arch cnn_fusion_arch(int num_classes, const CnnFusionOptions& o) {
  if (num_classes < 2) throw_validation("need at least 2 classes");
  if (!(o.dropout_p >= 0.0 && o.dropout_p < 1.0)) throw_validation("dropout probability must lie in [0,1)");
  Arch a;
  a.profile = "cnn-fusion";
  a.input_shape = {1, o.input_size, o.input_size};
  a.num_classes = num_classes;
  const int third = o.input_size / 3;
  a.branches = {
      BranchSpec{"eyes", 0, third, conv_branch(o)},
      BranchSpec{"face", 0, o.input_size, conv_branch(o)},
      BranchSpec{"mouth", o.input_size - third, o.input_size, conv_branch(o)},
  };
  a.fusion = {
      {LayerSpec::concat(), LayerSpec::dense(o.fusion_units), LayerSpec::relu()},
      {LayerSpec::concat(), LayerSpec::dense(o.fusion_units), LayerSpec::relu()},
  };
  a.head = {LayerSpec::dropout(o.dropout_p), LayerSpec::dense(num_classes)};
  a.descriptor = "cnn-fusion input=" + std::to_string(o.input_size) + " classes=" + std::to_string(num_classes) +
                 " conv=" + std::to_string(o.conv1_channels) + "," + std::to_string(o.conv2_channels) +
                 " units=" + std::to_string(o.branch_units) + "," + std::to_string(o.fusion_units) +
                 " dropout=" + format_real(o.dropout_p);
  return a;
}

Arch mlp_handcrafted_arch(int input_dim, int num_classes, int hidden, double dropout_p) {
  if (num_classes < 2) throw_validation("need at least 2 classes");
  if (input_dim < 1 || hidden < 1) throw_validation("mlp extents must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw_validation("dropout probability must lie in [0,1)");
  Arch a;
  a.profile = "mlp-handcrafted";
  a.input_shape = {input_dim};
  a.num_classes = num_classes;
  a.branches = {BranchSpec{"hidden", 0, 0, {LayerSpec::dense(hidden), LayerSpec::relu()}}};
  a.head = {LayerSpec::dropout(dropout_p), LayerSpec::dense(num_classes)};
  a.descriptor = "mlp-handcrafted input=" + std::to_string(input_dim) + " classes=" + std::to_string(num_classes) +
                 " hidden=" + std::to_string(hidden) + " dropout=" + format_real(dropout_p);
  return a;
}

Arch parse_arch(std::string_view descriptor) {
  std::istringstream in{std::string(descriptor)};
  std::string profile;
  in >> profile;
  std::map<std::string, std::string> kv;
  for (std::string tok; in >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw_validation("bad arch token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw_validation("arch descriptor missing '" + k + "'");
    return it->second;
  };
  auto pair_of = [&](const std::string& k) {
    const std::string& v = get(k);
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw_validation("arch field '" + k + "' needs two values");
    return std::pair<int, int>{std::stoi(v.substr(0, comma)), std::stoi(v.substr(comma + 1))};
  };
  try {
    if (profile == "cnn-fusion") {
      CnnFusionOptions o;
      o.input_size = std::stoi(get("input"));
      std::tie(o.conv1_channels, o.conv2_channels) = pair_of("conv");
      std::tie(o.branch_units, o.fusion_units) = pair_of("units");
      o.dropout_p = std::stod(get("dropout"));
      return cnn_fusion_arch(std::stoi(get("classes")), o);
    }
    if (profile == "mlp-handcrafted") {
      return mlp_handcrafted_arch(std::stoi(get("input")), std::stoi(get("classes")), std::stoi(get("hidden")),
                                  std::stod(get("dropout")));
    }
  } catch (const std::logic_error&) {
    throw ValidationError("malformed arch descriptor '" + std::string(descriptor) + "'");
  }
  throw ValidationError("unknown arch profile '" + profile + "'");
}

namespace {

StackPlan plan_stack(const std::string& name, std::vector<int> in_shape, const std::vector<LayerSpec>& specs,
                     std::vector<ParamInfo>& params) {
  StackPlan s;
  s.name = name;
  s.in_shape = in_shape;
  std::vector<int> shape = std::move(in_shape);
  int index = 0;
  for (const auto& spec : specs) {
    LayerPlan lp;
    lp.spec = spec;
    lp.in_shape = shape;
    const std::string pname = name + "." + std::to_string(index++);
    switch (spec.kind) {
      case LayerKind::dense: {
        if (shape.size() != 1) throw_validation(pname + ": dense layer needs a flat input");
        if (spec.units < 1) throw_validation(pname + ": dense units must be positive");
        lp.weight = static_cast<int>(params.size());
        params.push_back({pname + ".weight", {spec.units, shape[0]}, shape[0], false});
        params.push_back({pname + ".bias", {spec.units}, shape[0], true});
        shape = {spec.units};
        break;
      }
      case LayerKind::conv2d: {
        if (shape.size() != 3) throw_validation(pname + ": conv2d needs a (C,H,W) input");
        if (spec.filter < 1 || spec.out_channels < 1) throw_validation(pname + ": bad conv extents");
        const int oh = shape[1] - spec.filter + 1;
        const int ow = shape[2] - spec.filter + 1;
        if (oh < 1 || ow < 1) throw_validation(pname + ": input smaller than the filter");
        const int k = shape[0] * spec.filter * spec.filter;
        lp.weight = static_cast<int>(params.size());
        params.push_back({pname + ".weight", {spec.out_channels, k}, k, false});
        params.push_back({pname + ".bias", {spec.out_channels}, k, true});
        shape = {spec.out_channels, oh, ow};
        break;
      }
      case LayerKind::maxpool2: {
        if (shape.size() != 3) throw_validation(pname + ": maxpool2 needs a (C,H,W) input");
        shape = {shape[0], shape[1] / 2, shape[2] / 2};
        if (shape[1] < 1 || shape[2] < 1) throw_validation(pname + ": input too small to pool");
        break;
      }
      case LayerKind::dropout:
        if (!(spec.dropout_p >= 0.0 && spec.dropout_p < 1.0)) {
          throw_validation(pname + ": dropout probability must lie in [0,1)");
        }
        break;
      case LayerKind::relu: break;
      case LayerKind::flatten: shape = {static_cast<int>(shape_size(shape))}; break;
      case LayerKind::concat: throw_validation(pname + ": concat may only open a fusion stage");
    }
    lp.out_shape = shape;
    s.layers.push_back(std::move(lp));
  }
  s.out_shape = shape;
  return s;
}

}  // namespace

NetworkPlan build_plan(const Arch& arch) {
  if (arch.branches.empty()) throw_validation("arch needs at least one branch");
  if (arch.fusion.size() + 1 != arch.branches.size()) {
    throw_validation("arch needs exactly one fusion stage per extra branch");
  }
  NetworkPlan plan;
  for (const auto& b : arch.branches) {
    std::vector<int> in = arch.input_shape;
    if (b.row_begin != 0 || b.row_end != 0) {
      if (in.size() != 3 || b.row_begin < 0 || b.row_end > in[1] || b.row_end <= b.row_begin) {
        throw_validation("branch " + b.name + ": bad row range");
      }
      in[1] = b.row_end - b.row_begin;
    }
    plan.branches.push_back(plan_stack(b.name, in, b.layers, plan.params));
    if (plan.branches.back().out_shape.size() != 1) throw_validation("branch " + b.name + " must end flat");
  }
  std::size_t prev = static_cast<std::size_t>(plan.branches[0].out_shape[0]);
  for (std::size_t i = 0; i < arch.fusion.size(); ++i) {
    const auto& specs = arch.fusion[i];
    if (specs.empty() || specs.front().kind != LayerKind::concat) {
      throw_validation("fusion stage must open with concat");
    }
    const std::size_t right = static_cast<std::size_t>(plan.branches[i + 1].out_shape[0]);
    std::vector<LayerSpec> rest(specs.begin() + 1, specs.end());
    auto stage = plan_stack("fusion" + std::to_string(i + 1), {static_cast<int>(prev + right)}, rest, plan.params);
    stage.concat_left = prev;
    stage.concat_right = right;
    if (stage.out_shape.size() != 1) throw_validation("fusion stage must end flat");
    prev = static_cast<std::size_t>(stage.out_shape[0]);
    plan.fusion.push_back(std::move(stage));
  }
  plan.feature_dim = static_cast<int>(prev);
  plan.head = plan_stack("head", {plan.feature_dim}, arch.head, plan.params);
  if (plan.head.out_shape != std::vector<int>{arch.num_classes}) {
    throw_validation("head must end with " + std::to_string(arch.num_classes) + " logits");
  }
  return plan;
}

ModelState::ModelState(Arch a) : arch(std::move(a)), plan(build_plan(arch)) {
  for (const auto& p : plan.params) {
    params.emplace_back(p.shape);
    momentum.emplace_back(p.shape);
  }
  centers = Tensor({arch.num_classes, plan.feature_dim});
}

std::pair<int, int> ModelState::head_params() const {
  for (auto it = plan.head.layers.rbegin(); it != plan.head.layers.rend(); ++it) {
    if (it->weight >= 0) return {it->weight, it->weight + 1};
  }
  throw Error("model head has no parametric layer");
}

double he_std(int n_input) {
  if (n_input < 1) throw_validation("He initialization needs n_input >= 1");
  return std::sqrt(2.0 / n_input);
}

ModelState init_model(const Arch& arch, std::uint64_t seed) {
  ModelState m(arch);
  Rng rng = Rng::stream(seed, Substream::init);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& info = m.plan.params[i];
    if (info.is_bias) continue;
    const double sd = he_std(info.fan_in);
    for (double& w : m.params[i].data) w = rng.normal(0.0, sd);
  }
  return m;
}

namespace layers {

void dense_forward(const Tensor& w, const Tensor& b, std::span<const double> x, std::span<double> y) {
  const auto& k = kernels::active();
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = b.data[o] + k.dot(w.data.data() + o * in, x.data(), in);
}

void dense_backward(const Tensor& w, std::span<const double> x, std::span<const double> dy, Tensor& dw, Tensor& db,
                    std::span<double> dx) {
  const auto& k = kernels::active();
  const std::size_t in = x.size();
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    db.data[o] += g;
    k.axpy(g, x.data(), dw.data.data() + o * in, in);
    if (!dx.empty()) k.axpy(g, w.data.data() + o * in, dx.data(), in);
  }
}

namespace {

// Patch matrix: one row of in_c*f*f values per output position.
void im2col(const ConvDims& d, std::span<const double> x, std::vector<double>& cols) {
  const int oh = d.out_h();
  const int ow = d.out_w();
  const std::size_t kk = static_cast<std::size_t>(d.in_c) * d.filter * d.filter;
  cols.resize(static_cast<std::size_t>(oh) * ow * kk);
  double* out = cols.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int c = 0; c < d.in_c; ++c) {
        for (int ky = 0; ky < d.filter; ++ky) {
          const double* src = x.data() + (static_cast<std::size_t>(c) * d.in_h + oy + ky) * d.in_w + ox;
          for (int kx = 0; kx < d.filter; ++kx) *out++ = src[kx];
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvDims& d, const Tensor& w, const Tensor& b, std::span<const double> x,
                    std::span<double> y) {
  const auto& k = kernels::active();
  thread_local std::vector<double> cols;
  im2col(d, x, cols);
  const std::size_t positions = static_cast<std::size_t>(d.out_h()) * d.out_w();
  const std::size_t kk = static_cast<std::size_t>(d.in_c) * d.filter * d.filter;
  for (int c = 0; c < d.out_c; ++c) {
    const double* wc = w.data.data() + c * kk;
    double* yc = y.data() + c * positions;
    for (std::size_t p = 0; p < positions; ++p) yc[p] = b.data[c] + k.dot(wc, cols.data() + p * kk, kk);
  }
}

void conv2d_backward(const ConvDims& d, const Tensor& w, std::span<const double> x, std::span<const double> dy,
                     Tensor& dw, Tensor& db, std::span<double> dx) {
  const auto& k = kernels::active();
  thread_local std::vector<double> cols;
  thread_local std::vector<double> dcols;
  im2col(d, x, cols);
  const std::size_t positions = static_cast<std::size_t>(d.out_h()) * d.out_w();
  const std::size_t kk = static_cast<std::size_t>(d.in_c) * d.filter * d.filter;
  const bool want_dx = !dx.empty();
  if (want_dx) dcols.assign(positions * kk, 0.0);
  for (int c = 0; c < d.out_c; ++c) {
    const double* wc = w.data.data() + c * kk;
    double* dwc = dw.data.data() + c * kk;
    const double* gc = dy.data() + c * positions;
    double bias_grad = 0.0;
    for (std::size_t p = 0; p < positions; ++p) {
      const double g = gc[p];
      if (g == 0.0) continue;
      bias_grad += g;
      k.axpy(g, cols.data() + p * kk, dwc, kk);
      if (want_dx) k.axpy(g, wc, dcols.data() + p * kk, kk);
    }
    db.data[c] += bias_grad;
  }
  if (!want_dx) return;
  std::fill(dx.begin(), dx.end(), 0.0);
  const double* src = dcols.data();
  for (int oy = 0; oy < d.out_h(); ++oy) {
    for (int ox = 0; ox < d.out_w(); ++ox) {
      for (int c = 0; c < d.in_c; ++c) {
        for (int ky = 0; ky < d.filter; ++ky) {
          double* dst = dx.data() + (static_cast<std::size_t>(c) * d.in_h + oy + ky) * d.in_w + ox;
          for (int kx = 0; kx < d.filter; ++kx) dst[kx] += *src++;
        }
      }
    }
  }
}

void relu_forward(std::span<const double> x, std::span<double> y) {
  kernels::active().relu(x.data(), y.data(), x.size());
}

void relu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
  kernels::active().relu_backward(x.data(), dy.data(), dx.data(), x.size());
}

void maxpool2_forward(int c, int h, int w, std::span<const double> x, std::span<double> y,
                      std::vector<std::uint32_t>& argmax) {
  const int oh = h / 2;
  const int ow = w / 2;
  argmax.resize(static_cast<std::size_t>(c) * oh * ow);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t base = static_cast<std::size_t>(ch) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * oy) * w + 2 * ox;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = base + static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox + dx;
            if (x[i] > x[best]) best = i;
          }
        }
        y[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

void maxpool2_backward(std::span<const std::uint32_t> argmax, std::span<const double> dy, std::span<double> dx) {
  std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
}

void dropout_forward(double p, Rng& rng, std::span<const double> x, std::span<double> y, std::vector<double>& mask) {
  const double keep_scale = 1.0 / (1.0 - p);
  mask.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() >= p ? keep_scale : 0.0;
    y[i] = x[i] * mask[i];
  }
}

void dropout_backward(std::span<const double> mask, std::span<const double> dy, std::span<double> dx) {
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
}

}  // namespace layers

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

layers::ConvDims conv_dims(const LayerPlan& lp) {
  return {lp.in_shape[0], lp.in_shape[1], lp.in_shape[2], lp.spec.filter, lp.spec.out_channels};
}

void run_stack(const ModelState& m, const StackPlan& sp, std::vector<double> input, Mode mode, Rng* rng,
               StackCache& cache) {
  const std::size_t n = sp.layers.size();
  cache.acts.assign(n + 1, {});
  cache.masks.assign(n, {});
  cache.argmax.assign(n, {});
  cache.acts[0] = std::move(input);
  for (std::size_t k = 0; k < n; ++k) {
    const LayerPlan& lp = sp.layers[k];
    const auto& x = cache.acts[k];
    auto& y = cache.acts[k + 1];
    y.assign(shape_size(lp.out_shape), 0.0);
    switch (lp.spec.kind) {
      case LayerKind::dense:
        layers::dense_forward(m.params[lp.weight], m.params[lp.weight + 1], x, y);
        break;
      case LayerKind::conv2d:
        layers::conv2d_forward(conv_dims(lp), m.params[lp.weight], m.params[lp.weight + 1], x, y);
        break;
      case LayerKind::relu: layers::relu_forward(x, y); break;
      case LayerKind::maxpool2:
        layers::maxpool2_forward(lp.in_shape[0], lp.in_shape[1], lp.in_shape[2], x, y, cache.argmax[k]);
        break;
      case LayerKind::dropout:
        if (mode == Mode::train) {
          layers::dropout_forward(lp.spec.dropout_p, *rng, x, y, cache.masks[k]);
        } else {
          y = x;
        }
        break;
      case LayerKind::flatten:
      case LayerKind::concat: y = x; break;
    }
  }
}

// Returns dL/d(stack input) when want_input_grad, else an empty vector.
std::vector<double> backprop_stack(const ModelState& m, const StackPlan& sp, const StackCache& cache,
                                   std::vector<double> dy, std::vector<Tensor>& grads, bool want_input_grad) {
  for (std::size_t k = sp.layers.size(); k-- > 0;) {
    const LayerPlan& lp = sp.layers[k];
    const auto& x = cache.acts[k];
    const bool need_dx = want_input_grad || k > 0;
    std::vector<double> dx(need_dx ? x.size() : 0);
    switch (lp.spec.kind) {
      case LayerKind::dense:
        layers::dense_backward(m.params[lp.weight], x, dy, grads[lp.weight], grads[lp.weight + 1], dx);
        break;
      case LayerKind::conv2d:
        layers::conv2d_backward(conv_dims(lp), m.params[lp.weight], x, dy, grads[lp.weight], grads[lp.weight + 1],
                                dx);
        break;
      case LayerKind::relu:
        if (need_dx) layers::relu_backward(x, dy, dx);
        break;
      case LayerKind::maxpool2:
        if (need_dx) layers::maxpool2_backward(cache.argmax[k], dy, dx);
        break;
      case LayerKind::dropout:
        if (need_dx) {
          if (cache.masks[k].empty()) {
            dx = dy;
          } else {
            layers::dropout_backward(cache.masks[k], dy, dx);
          }
        }
        break;
      case LayerKind::flatten:
      case LayerKind::concat:
        if (need_dx) dx = dy;
        break;
    }
    dy = std::move(dx);
  }
  return dy;
}

std::vector<double> branch_input(const Arch& arch, const BranchSpec& b, std::span<const double> sample) {
  if (b.row_begin == 0 && b.row_end == 0) return {sample.begin(), sample.end()};
  const int c = arch.input_shape[0];
  const int h = arch.input_shape[1];
  const int w = arch.input_shape[2];
  const int rows = b.row_end - b.row_begin;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(c) * rows * w);
  for (int ch = 0; ch < c; ++ch) {
    const auto first = sample.begin() + (static_cast<std::ptrdiff_t>(ch) * h + b.row_begin) * w;
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(rows) * w);
  }
  return out;
}

constexpr std::size_t kGradientGroup = 16;

}  // namespace

std::uint64_t ForwardCache::activation_signature() const {
  std::uint64_t h = 0x1234567;
  for (const auto& s : samples) {
    for (const auto& st : s.stacks) {
      for (const auto& a : st.acts) {
        for (double v : a) h = mix64(h ^ (v > 0.0 ? 1u : 0u));
      }
      for (const auto& am : st.argmax) {
        for (auto i : am) h = mix64(h ^ i);
      }
    }
  }
  return h;
}

ForwardResult forward(const ModelState& m, const Tensor& batch, Mode mode, Rng* rng, int workers) {
  std::vector<int> expect{batch.shape.empty() ? 0 : batch.shape[0]};
  expect.insert(expect.end(), m.arch.input_shape.begin(), m.arch.input_shape.end());
  if (batch.shape != expect) {
    throw ValidationError("batch shape " + shape_string(batch.shape) + " does not match model input " +
                          shape_string(m.arch.input_shape));
  }
  if (mode == Mode::train && rng == nullptr) throw ValidationError("train-mode forward needs an rng");

  const std::size_t n = static_cast<std::size_t>(batch.shape[0]);
  const NetworkPlan& plan = m.plan;
  ForwardResult r;
  r.logits = Tensor({static_cast<int>(n), m.num_classes()});
  r.features = Tensor({static_cast<int>(n), plan.feature_dim});
  r.cache.mode = mode;
  r.cache.model = &m;
  r.cache.generation = m.generation;
  r.cache.samples.resize(n);
  const std::uint64_t dropout_key = mode == Mode::train ? rng->next_u64() : 0;

  parallel_for(n, workers, [&](std::size_t i) {
    Rng sample_rng = Rng::stream(dropout_key, Substream::dropout, i);
    SampleCache& sc = r.cache.samples[i];
    const std::size_t nb = plan.branches.size();
    sc.stacks.resize(nb + plan.fusion.size() + 1);
    const auto sample = batch.row(i);
    for (std::size_t b = 0; b < nb; ++b) {
      run_stack(m, plan.branches[b], branch_input(m.arch, m.arch.branches[b], sample), mode, &sample_rng,
                sc.stacks[b]);
    }
    std::vector<double> prev = sc.stacks[0].acts.back();
    for (std::size_t f = 0; f < plan.fusion.size(); ++f) {
      const auto& right = sc.stacks[f + 1].acts.back();
      prev.insert(prev.end(), right.begin(), right.end());
      StackCache& fc = sc.stacks[nb + f];
      run_stack(m, plan.fusion[f], std::move(prev), mode, &sample_rng, fc);
      prev = fc.acts.back();
    }
    std::copy(prev.begin(), prev.end(), r.features.row(i).begin());
    StackCache& hc = sc.stacks.back();
    run_stack(m, plan.head, std::move(prev), mode, &sample_rng, hc);
    std::copy(hc.acts.back().begin(), hc.acts.back().end(), r.logits.row(i).begin());
  });
  return r;
}

std::vector<Tensor> zero_gradients(const ModelState& m) {
  std::vector<Tensor> g;
  g.reserve(m.params.size());
  for (const auto& p : m.params) g.emplace_back(p.shape);
  return g;
}

std::vector<Tensor> backward(const ModelState& m, const ForwardCache& cache, const Tensor& dlogits,
                             const Tensor& dfeatures, int workers) {
  if (cache.model != &m || cache.generation != m.generation) {
    throw ValidationError("forward cache is stale or belongs to another model");
  }
  if (cache.mode != Mode::train) throw ValidationError("backward needs a train-mode forward cache");
  const std::size_t n = cache.samples.size();
  if (dlogits.shape != std::vector<int>{static_cast<int>(n), m.num_classes()} ||
      dfeatures.shape != std::vector<int>{static_cast<int>(n), m.feature_dim()}) {
    throw ValidationError("upstream gradient shapes do not match the forward cache");
  }

  const NetworkPlan& plan = m.plan;
  const std::size_t nb = plan.branches.size();
  const std::size_t groups = (n + kGradientGroup - 1) / kGradientGroup;
  std::vector<std::vector<Tensor>> partial(groups);

  parallel_for(groups, workers, [&](std::size_t g) {
    auto& grads = partial[g];
    grads = zero_gradients(m);
    const std::size_t end = std::min(n, (g + 1) * kGradientGroup);
    for (std::size_t i = g * kGradientGroup; i < end; ++i) {
      const SampleCache& sc = cache.samples[i];
      const auto dl = dlogits.row(i);
      std::vector<double> d = backprop_stack(m, plan.head, sc.stacks.back(), {dl.begin(), dl.end()}, grads, true);
      const auto df = dfeatures.row(i);
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += df[k];

      std::vector<std::vector<double>> dbranch(nb);
      for (std::size_t f = plan.fusion.size(); f-- > 0;) {
        const StackPlan& sp = plan.fusion[f];
        std::vector<double> din = backprop_stack(m, sp, sc.stacks[nb + f], std::move(d), grads, true);
        dbranch[f + 1].assign(din.begin() + static_cast<std::ptrdiff_t>(sp.concat_left), din.end());
        din.resize(sp.concat_left);
        d = std::move(din);
      }
      dbranch[0] = std::move(d);
      for (std::size_t b = 0; b < nb; ++b) {
        backprop_stack(m, plan.branches[b], sc.stacks[b], std::move(dbranch[b]), grads, false);
      }
    }
  });

  std::vector<Tensor> total = zero_gradients(m);
  for (const auto& grads : partial) {
    for (std::size_t p = 0; p < total.size(); ++p) {
      for (std::size_t k = 0; k < total[p].size(); ++k) total[p].data[k] += grads[p].data[k];
    }
  }
  return total;
}

Tensor softmax(const Tensor& logits) {
  Tensor out(logits.shape);
  const std::size_t rows = logits.shape.empty() ? 0 : static_cast<std::size_t>(logits.shape[0]);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto z = logits.row(r);
    auto p = out.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (double& v : p) v /= sum;
  }
  return out;
}

}  // namespace mfer
