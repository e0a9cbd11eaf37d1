#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfer/dataset.hpp"
#include "mfer/network.hpp"

namespace mfer {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int classes);

  std::int64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth * num_classes + pred)]; }
  std::int64_t total() const;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, int num_classes);

/// One-vs-rest binary metrics for a single class. Any 0/0 ratio is 0, except
/// specificity when there are no negatives at all.
struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f_measure = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double accuracy = 0.0;  // (TP + TN) / total
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;  // unweighted means over classes
  double accuracy_trace = 0.0;
  double accuracy_ovr_macro = 0.0;
  double mae = 0.0;  // mean |true index - predicted index|
};

MetricsReport metrics(const ConfusionMatrix& cm);

double mae(std::span<const int> truth, std::span<const int> pred);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values);

struct Prediction {
  int label = 0;
  std::vector<double> probs;
};

/// Top-left offsets of the five 42x42 crops of a 48x48 image: the four
/// corners, then the center.
std::vector<std::pair<int, int>> multicrop_offsets();

/// Averages softmax over the five crops and their mirrors. `image` is a
/// model-ready 48x48 image.
Prediction multicrop_predict(const ModelState& m, const GrayImage& image);
std::vector<Prediction> multicrop_predict(const ModelState& m, std::span<const GrayImage> images, int workers = 1);

/// Feature vectors (head input) of the center crops, one row per image.
Tensor extract_features(const ModelState& m, std::span<const GrayImage> images, int workers = 1);

struct Gallery {
  Tensor features;  // (N, d)
  std::vector<int> labels;
};

Gallery build_gallery(const ModelState& m, std::span<const LabeledSample> samples, int workers = 1);

struct NearestMatch {
  int label = 0;
  std::size_t index = 0;
  double distance = 0.0;
};

/// Gallery entry with the smallest Euclidean distance; ties go to the lowest index.
NearestMatch nearest_feature(std::span<const double> feature, const Gallery& gallery);

NearestMatch nearest_feature_predict(const ModelState& m, const GrayImage& image, const Gallery& gallery);

struct ReportProtocol {
  std::string split_mode;
  std::uint64_t seed = 0;
  std::string inference_mode;
  std::string profile;
  std::vector<std::string> class_names;
};

/// Pretty-printed JSON with accuracy_trace, accuracy_ovr_macro, mae,
/// per_class, macro and protocol.
std::string metrics_json(const MetricsReport& report, const ReportProtocol& protocol);

/// Header `true,<predicted names...>`, then one row per true class.
std::string confusion_csv(const ConfusionMatrix& cm, std::span<const std::string> class_names);

struct ExternalPrediction {
  std::string path;
  std::string label;
};

/// CSV with header `path,predicted_label`.
std::vector<ExternalPrediction> parse_predictions_csv(std::string_view text);

/// Pairs every manifest entry with its external prediction by path. Returns
/// (true labels, predicted labels) as class indices.
std::pair<std::vector<int>, std::vector<int>> match_predictions(const Manifest& manifest,
                                                                std::span<const ExternalPrediction> preds);

}  // namespace mfer
