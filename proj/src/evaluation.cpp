#include "mfer/evaluation.hpp"

#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mfer/error.hpp"
#include "mfer/kernels.hpp"
#include "mfer/pipeline.hpp"

namespace mfer {

ConfusionMatrix::ConfusionMatrix(int classes) : num_classes(classes) {
  if (classes < 1) throw ValidationError("confusion matrix needs at least one class");
  counts.assign(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0);
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, int num_classes) {
  if (truth.size() != pred.size()) throw ValidationError("confusion: label vectors differ in length");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes) {
      throw ValidationError("confusion: label out of range at sample " + std::to_string(i));
    }
    ++cm.counts[static_cast<std::size_t>(truth[i] * num_classes + pred[i])];
  }
  return cm;
}

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

MetricsReport metrics(const ConfusionMatrix& cm) {
  const int c = cm.num_classes;
  const double total = static_cast<double>(cm.total());
  MetricsReport r;
  r.per_class.resize(static_cast<std::size_t>(c));
  double trace = 0.0;
  double abs_err = 0.0;
  for (int t = 0; t < c; ++t) {
    for (int p = 0; p < c; ++p) {
      if (t == p) trace += static_cast<double>(cm.at(t, p));
      abs_err += static_cast<double>(cm.at(t, p)) * std::abs(t - p);
    }
  }
  for (int k = 0; k < c; ++k) {
    double tp = static_cast<double>(cm.at(k, k));
    double row = 0.0;
    double col = 0.0;
    for (int j = 0; j < c; ++j) {
      row += static_cast<double>(cm.at(k, j));
      col += static_cast<double>(cm.at(j, k));
    }
    const double fn = row - tp;
    const double fp = col - tp;
    const double tn = total - tp - fn - fp;
    auto& m = r.per_class[static_cast<std::size_t>(k)];
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.sensitivity = ratio(tp, tp + fn);
    m.f_measure = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
    m.specificity = (tn + fp == 0.0) ? (total > 0.0 ? 1.0 : 0.0) : tn / (tn + fp);
    m.accuracy = ratio(tp + tn, total);
  }
  for (const auto& m : r.per_class) {
    r.macro.precision += m.precision / c;
    r.macro.recall += m.recall / c;
    r.macro.f_measure += m.f_measure / c;
    r.macro.sensitivity += m.sensitivity / c;
    r.macro.specificity += m.specificity / c;
    r.macro.accuracy += m.accuracy / c;
  }
  r.accuracy_trace = ratio(trace, total);
  r.accuracy_ovr_macro = r.macro.accuracy;
  r.mae = ratio(abs_err, total);
  return r;
}

double mae(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw ValidationError("mae: label vectors differ in length");
  if (truth.empty()) throw ValidationError("mae: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
  return s / static_cast<double>(truth.size());
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<std::pair<int, int>> multicrop_offsets() {
  const int e = kStoredSize - kCropSize;
  return {{0, 0}, {e, 0}, {0, e}, {e, e}, {e / 2, e / 2}};
}

namespace {

void require_stored_size(const GrayImage& img) {
  if (img.width != kStoredSize || img.height != kStoredSize) {
    throw ValidationError("expected a 48x48 image, got " + std::to_string(img.width) + "x" +
                          std::to_string(img.height));
  }
}

}  // namespace

Prediction multicrop_predict(const ModelState& m, const GrayImage& image) {
  require_stored_size(image);
  std::vector<GrayImage> crops;
  for (const auto& [x, y] : multicrop_offsets()) {
    GrayImage c = crop(image, x, y, kCropSize, kCropSize);
    crops.push_back(mirror_horizontal(c));
    crops.push_back(std::move(c));
  }
  const ForwardResult fr = forward(m, encode_batch(m.arch, crops), Mode::eval);
  const Tensor probs = softmax(fr.logits);
  Prediction p;
  p.probs.assign(static_cast<std::size_t>(m.num_classes()), 0.0);
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const auto row = probs.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) p.probs[k] += row[k];
  }
  for (double& v : p.probs) v /= static_cast<double>(crops.size());
  p.label = argmax(p.probs);
  return p;
}

std::vector<Prediction> multicrop_predict(const ModelState& m, std::span<const GrayImage> images, int workers) {
  std::vector<Prediction> out(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) { out[i] = multicrop_predict(m, images[i]); });
  return out;
}

Tensor extract_features(const ModelState& m, std::span<const GrayImage> images, int workers) {
  std::vector<GrayImage> crops;
  crops.reserve(images.size());
  for (const auto& img : images) {
    require_stored_size(img);
    crops.push_back(center_crop(img));
  }
  return forward(m, encode_batch(m.arch, crops), Mode::eval, nullptr, workers).features;
}

Gallery build_gallery(const ModelState& m, std::span<const LabeledSample> samples, int workers) {
  std::vector<GrayImage> images;
  Gallery g;
  for (const auto& s : samples) {
    images.push_back(s.image);
    g.labels.push_back(s.label);
  }
  g.features = extract_features(m, images, workers);
  return g;
}

NearestMatch nearest_feature(std::span<const double> feature, const Gallery& gallery) {
  if (gallery.labels.empty()) throw ValidationError("nearest-feature: empty gallery");
  if (gallery.features.rank() != 2 || static_cast<std::size_t>(gallery.features.shape[0]) != gallery.labels.size()) {
    throw ValidationError("nearest-feature: gallery features and labels disagree");
  }
  if (static_cast<std::size_t>(gallery.features.shape[1]) != feature.size()) {
    throw ValidationError("nearest-feature: feature dimension " + std::to_string(feature.size()) +
                          " does not match gallery dimension " + std::to_string(gallery.features.shape[1]));
  }
  NearestMatch best;
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < gallery.labels.size(); ++i) {
    const double d = kernels::squared_distance(feature, gallery.features.row(i));
    if (d < best_sq) {
      best_sq = d;
      best.index = i;
      best.label = gallery.labels[i];
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

NearestMatch nearest_feature_predict(const ModelState& m, const GrayImage& image, const Gallery& gallery) {
  const Tensor f = extract_features(m, std::span<const GrayImage>(&image, 1));
  return nearest_feature(f.row(0), gallery);
}

std::string metrics_json(const MetricsReport& report, const ReportProtocol& protocol) {
  using nlohmann::ordered_json;
  auto class_json = [](const ClassMetrics& m) {
    ordered_json j;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f_measure"] = m.f_measure;
    j["sensitivity"] = m.sensitivity;
    j["specificity"] = m.specificity;
    j["accuracy"] = m.accuracy;
    return j;
  };
  ordered_json j;
  j["accuracy_trace"] = report.accuracy_trace;
  j["accuracy_ovr_macro"] = report.accuracy_ovr_macro;
  j["mae"] = report.mae;
  ordered_json per = ordered_json::array();
  for (std::size_t k = 0; k < report.per_class.size(); ++k) {
    ordered_json e;
    e["name"] = k < protocol.class_names.size() ? protocol.class_names[k] : std::to_string(k);
    const ordered_json values = class_json(report.per_class[k]);
    for (const auto& [key, v] : values.items()) e[key] = v;
    per.push_back(std::move(e));
  }
  j["per_class"] = std::move(per);
  j["macro"] = class_json(report.macro);
  ordered_json p;
  p["split_mode"] = protocol.split_mode;
  p["seed"] = protocol.seed;
  p["inference_mode"] = protocol.inference_mode;
  p["profile"] = protocol.profile;
  p["class_order"] = protocol.class_names;
  p["accuracy_trace_definition"] = "trace(confusion) / total";
  p["accuracy_ovr_macro_definition"] = "mean over classes of one-vs-rest (TP+TN)/total";
  p["mae_definition"] = "mean |true index - predicted index| under class_order";
  j["protocol"] = std::move(p);
  return j.dump(2) + "\n";
}

std::string confusion_csv(const ConfusionMatrix& cm, std::span<const std::string> class_names) {
  if (class_names.size() != static_cast<std::size_t>(cm.num_classes)) {
    throw ValidationError("confusion_csv: class name count does not match the matrix");
  }
  std::ostringstream out;
  out << "true";
  for (const auto& n : class_names) out << ',' << n;
  out << '\n';
  for (int t = 0; t < cm.num_classes; ++t) {
    out << class_names[static_cast<std::size_t>(t)];
    for (int p = 0; p < cm.num_classes; ++p) out << ',' << cm.at(t, p);
    out << '\n';
  }
  return out.str();
}

std::vector<ExternalPrediction> parse_predictions_csv(std::string_view text) {
  std::vector<ExternalPrediction> out;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "path,predicted_label") {
        throw ValidationError("predictions: expected header 'path,predicted_label', got '" + line + "'");
      }
      header = true;
      continue;
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw ValidationError("predictions: line " + std::to_string(lineno) + " has no comma");
    }
    out.push_back({line.substr(0, comma), line.substr(comma + 1)});
  }
  if (!header) throw ValidationError("predictions: missing header");
  return out;
}

std::pair<std::vector<int>, std::vector<int>> match_predictions(const Manifest& manifest,
                                                                std::span<const ExternalPrediction> preds) {
  std::map<std::string, std::string> by_path;
  for (const auto& p : preds) {
    if (!by_path.emplace(p.path, p.label).second) {
      throw ValidationError("predictions: duplicate path '" + p.path + "'");
    }
  }
  std::vector<int> truth;
  std::vector<int> pred;
  for (const auto& e : manifest.entries) {
    const auto it = by_path.find(e.path);
    if (it == by_path.end()) throw ValidationError("predictions: no prediction for '" + e.path + "'");
    truth.push_back(manifest.label_index(e.label));
    pred.push_back(manifest.label_index(it->second));
  }
  return {std::move(truth), std::move(pred)};
}

}  // namespace mfer
