#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mfer/preprocess.hpp"
#include "mfer/rng.hpp"
#include "mfer/tensor.hpp"

namespace mfer {

enum class LayerKind { dense, conv2d, relu, maxpool2, dropout, flatten, concat };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int units = 0;         // dense
  int filter = 0;        // conv2d, square, valid padding, stride 1
  int out_channels = 0;  // conv2d
  double dropout_p = 0.0;

  static LayerSpec dense(int units) { return {LayerKind::dense, units, 0, 0, 0.0}; }
  static LayerSpec conv2d(int filter, int channels) { return {LayerKind::conv2d, 0, filter, channels, 0.0}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0, 0.0}; }
  static LayerSpec maxpool2() { return {LayerKind::maxpool2, 0, 0, 0, 0.0}; }
  static LayerSpec dropout(double p) { return {LayerKind::dropout, 0, 0, 0, p}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0, 0.0}; }
  static LayerSpec concat() { return {LayerKind::concat, 0, 0, 0, 0.0}; }

  bool operator==(const LayerSpec&) const = default;
};

/// One branch reads rows [row_begin, row_end) of a (C,H,W) input; both zero
/// means the whole input (also the only option for 1-D inputs).
struct BranchSpec {
  std::string name;
  int row_begin = 0;
  int row_end = 0;
  std::vector<LayerSpec> layers;

  bool operator==(const BranchSpec&) const = default;
};

/// Branch stacks, then fusion stages, then the classification head.
/// Fusion stage i concatenates the previous stage's output (branch 0 for the
/// first stage) with branch i+1 and must start with a concat layer. The head
/// input is the feature vector used by the center loss and nearest-feature
/// prediction.
struct Arch {
  std::string profile;
  std::vector<int> input_shape;
  int num_classes = 0;
  std::vector<BranchSpec> branches;
  std::vector<std::vector<LayerSpec>> fusion;
  std::vector<LayerSpec> head;
  /// Canonical one-line text the profile factories can rebuild from.
  std::string descriptor;

  bool operator==(const Arch&) const = default;
};

struct CnnFusionOptions {
  int input_size = 42;
  int conv1_channels = 16;
  int conv2_channels = 32;
  int branch_units = 128;
  int fusion_units = 128;
  double dropout_p = 0.5;
};

/// Three branches (eyes = top third of the rows, face = everything, mouth =
/// bottom third), each conv3x3+ReLU+maxpool2 twice, flatten, dense+ReLU.
/// fusion1 = concat(eyes, face) -> dense+ReLU; fusion2 = concat(fusion1,
/// mouth) -> dense+ReLU; head = dropout -> dense(C).
Arch cnn_fusion_arch(int num_classes, const CnnFusionOptions& opt = {});

/// dense(hidden)+ReLU over a handcrafted descriptor, then dropout -> dense(C).
Arch mlp_handcrafted_arch(int input_dim, int num_classes, int hidden = 256, double dropout_p = 0.5);

/// Inverse of Arch::descriptor.
Arch parse_arch(std::string_view descriptor);

struct LayerPlan {
  LayerSpec spec;
  std::vector<int> in_shape;
  std::vector<int> out_shape;
  int weight = -1;  // index into params; the bias follows at weight + 1
};

struct StackPlan {
  std::string name;
  std::vector<int> in_shape;
  std::vector<int> out_shape;
  std::vector<LayerPlan> layers;
  /// For fusion stages: widths of the two concatenated parts.
  std::size_t concat_left = 0;
  std::size_t concat_right = 0;
};

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  int fan_in = 0;
  bool is_bias = false;
};

struct NetworkPlan {
  std::vector<StackPlan> branches;
  std::vector<StackPlan> fusion;
  StackPlan head;
  std::vector<ParamInfo> params;
  int feature_dim = 0;
};

/// Resolves every layer shape; throws ValidationError on an impossible arch.
NetworkPlan build_plan(const Arch& arch);

/// Parameters, momentum buffers, class centers and the normalization the
/// model was trained with.
struct ModelState {
  Arch arch;
  NetworkPlan plan;
  std::vector<Tensor> params;
  std::vector<Tensor> momentum;
  Tensor centers;  // (C, feature_dim)
  std::optional<PixelStats> pixel_stats;
  std::vector<std::string> class_names;
  /// Free-form settings carried in checkpoints (preprocessing parameters, ...).
  std::map<std::string, std::string> meta;
  /// Bumped whenever parameters change so stale forward caches are detected.
  std::uint64_t generation = 0;

  ModelState() = default;
  /// All tensors zero.
  explicit ModelState(Arch a);

  int num_classes() const { return arch.num_classes; }
  int feature_dim() const { return plan.feature_dim; }
  /// Indices of the final dense layer's weight and bias.
  std::pair<int, int> head_params() const;
};

/// sqrt(2 / n_input); throws ValidationError for n_input == 0.
double he_std(int n_input);

/// He-normal weights from the seeded init stream; zero biases, momentum and centers.
ModelState init_model(const Arch& arch, std::uint64_t seed);

enum class Mode { train, eval };

namespace layers {

void dense_forward(const Tensor& w, const Tensor& b, std::span<const double> x, std::span<double> y);
/// Accumulates into dw/db; dx (if non-empty) is overwritten.
void dense_backward(const Tensor& w, std::span<const double> x, std::span<const double> dy, Tensor& dw,
                    Tensor& db, std::span<double> dx);

struct ConvDims {
  int in_c, in_h, in_w, filter, out_c;
  int out_h() const { return in_h - filter + 1; }
  int out_w() const { return in_w - filter + 1; }
};
void conv2d_forward(const ConvDims& d, const Tensor& w, const Tensor& b, std::span<const double> x,
                    std::span<double> y);
void conv2d_backward(const ConvDims& d, const Tensor& w, std::span<const double> x, std::span<const double> dy,
                     Tensor& dw, Tensor& db, std::span<double> dx);

void relu_forward(std::span<const double> x, std::span<double> y);
void relu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx);

/// 2x2 max pooling, stride 2, odd trailing rows/columns dropped. argmax holds
/// the winning input index per output (first maximum on ties).
void maxpool2_forward(int c, int h, int w, std::span<const double> x, std::span<double> y,
                      std::vector<std::uint32_t>& argmax);
void maxpool2_backward(std::span<const std::uint32_t> argmax, std::span<const double> dy, std::span<double> dx);

/// Inverted dropout: mask entries are 0 or 1/(1-p).
void dropout_forward(double p, Rng& rng, std::span<const double> x, std::span<double> y,
                     std::vector<double>& mask);
void dropout_backward(std::span<const double> mask, std::span<const double> dy, std::span<double> dx);

}  // namespace layers

struct StackCache {
  std::vector<std::vector<double>> acts;  // acts[0] input, acts[k+1] output of layer k
  std::vector<std::vector<double>> masks;
  std::vector<std::vector<std::uint32_t>> argmax;
};

struct SampleCache {
  std::vector<StackCache> stacks;  // branches, fusion stages, head
};

struct ForwardCache {
  Mode mode = Mode::eval;
  const ModelState* model = nullptr;
  std::uint64_t generation = 0;
  std::vector<SampleCache> samples;

  /// Hash of every ReLU sign pattern and pooling winner, for detecting
  /// non-differentiable points in finite-difference checks.
  std::uint64_t activation_signature() const;
};

struct ForwardResult {
  Tensor logits;    // (B, C)
  Tensor features;  // (B, feature_dim)
  ForwardCache cache;
};

/// `batch` has shape (B, input_shape...). Train mode needs `rng` for dropout;
/// each sample draws its own mask stream. `workers` never changes results.
ForwardResult forward(const ModelState& m, const Tensor& batch, Mode mode, Rng* rng = nullptr,
                      int workers = 1);

/// Exact parameter gradients of the upstream loss given dL/dlogits and
/// dL/dfeatures (the latter adds at the feature node). Samples are reduced
/// in fixed groups so the result does not depend on `workers`.
std::vector<Tensor> backward(const ModelState& m, const ForwardCache& cache, const Tensor& dlogits,
                             const Tensor& dfeatures, int workers = 1);

/// Zero tensors shaped like the model parameters.
std::vector<Tensor> zero_gradients(const ModelState& m);

/// Row-wise exp(z - max z) / sum.
Tensor softmax(const Tensor& logits);

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace mfer
