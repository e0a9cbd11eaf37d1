#include "mfer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "mfer/error.hpp"
#include "mfer/rng.hpp"

namespace mfer {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_commas(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

const std::vector<std::string>& jaffe_classes() {
  static const std::vector<std::string> classes{"AN", "DI", "FE", "HA", "NE", "SA", "SU"};
  return classes;
}

int Manifest::label_index(std::string_view name) const {
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) throw_validation("label '" + std::string(name) + "' not in class list");
  return static_cast<int>(it - class_names.begin());
}

JaffeName parse_jaffe_name(std::string_view filename, std::span<const std::string> class_names) {
  const auto slash = filename.find_last_of("/\\");
  if (slash != std::string_view::npos) filename.remove_prefix(slash + 1);

  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = filename.find('.', start);
    parts.push_back(filename.substr(start, dot - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  auto is_digits = [](std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  };
  if (parts.size() != 4 || parts[0].empty() || parts[1].size() < 3 || !is_digits(parts[2]) ||
      parts[3].empty()) {
    throw_validation("'" + std::string(filename) + "' does not match <SUBJ>.<EXPR><n>.<id>.<ext>");
  }
  const std::string_view code = parts[1].substr(0, 2);
  if (!is_digits(parts[1].substr(2))) {
    throw_validation("'" + std::string(filename) + "' does not match <SUBJ>.<EXPR><n>.<id>.<ext>");
  }
  const auto& codes = jaffe_classes();
  if (std::find(codes.begin(), codes.end(), code) == codes.end()) {
    throw_validation("unknown expression code '" + std::string(code) + "' in " + std::string(filename));
  }
  const auto it = std::find(class_names.begin(), class_names.end(), code);
  if (it == class_names.end()) {
    throw_validation("expression code '" + std::string(code) + "' not in class list");
  }
  return JaffeName{static_cast<int>(it - class_names.begin()), std::string(parts[0])};
}

Manifest load_manifest(std::string_view text) {
  Manifest m;
  bool have_header = false;
  bool declared_classes = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::string_view body = trim(line.substr(1));
      constexpr std::string_view key = "classes:";
      if (body.starts_with(key)) {
        m.class_names = split_commas(trim(body.substr(key.size())));
        std::set<std::string> unique(m.class_names.begin(), m.class_names.end());
        if (unique.size() != m.class_names.size() || unique.count("")) {
          throw_validation("manifest class list has duplicate or empty names");
        }
        declared_classes = true;
      }
      continue;
    }
    if (!have_header) {
      const auto cols = split_commas(line);
      if (cols.size() != 3 || cols[0] != "path" || cols[1] != "label" || cols[2] != "subject") {
        throw_validation("manifest header must be 'path,label,subject' (line " + std::to_string(line_no) + ")");
      }
      have_header = true;
      continue;
    }
    auto cols = split_commas(line);
    if (cols.size() != 3 || cols[0].empty() || cols[1].empty() || cols[2].empty()) {
      throw_validation("manifest line " + std::to_string(line_no) + ": missing column, expected path,label,subject");
    }
    m.entries.push_back(ManifestEntry{std::move(cols[0]), std::move(cols[1]), std::move(cols[2])});
  }
  if (!have_header) throw_validation("manifest is missing the 'path,label,subject' header");

  if (declared_classes) {
    for (const auto& e : m.entries) {
      if (std::find(m.class_names.begin(), m.class_names.end(), e.label) == m.class_names.end()) {
        throw_validation("manifest label '" + e.label + "' not in declared classes");
      }
    }
  } else {
    std::set<std::string> labels;
    for (const auto& e : m.entries) labels.insert(e.label);
    m.class_names.assign(labels.begin(), labels.end());
  }
  return m;
}

std::string format_manifest(const Manifest& manifest) {
  std::ostringstream out;
  out << "# classes: ";
  for (std::size_t i = 0; i < manifest.class_names.size(); ++i) {
    out << (i ? "," : "") << manifest.class_names[i];
  }
  out << "\npath,label,subject\n";
  for (const auto& e : manifest.entries) out << e.path << ',' << e.label << ',' << e.subject << '\n';
  return out.str();
}

const char* to_string(SplitMode mode) {
  return mode == SplitMode::stratified ? "stratified" : "subject-exclusive";
}

SplitMode parse_split_mode(std::string_view text) {
  if (text == "stratified") return SplitMode::stratified;
  if (text == "subject-exclusive" || text == "subject") return SplitMode::subject_exclusive;
  throw_validation("unknown split mode '" + std::string(text) + "'");
}

SplitIndices split_indices(std::span<const int> labels, std::span<const std::string> subjects,
                           double test_fraction, std::uint64_t seed, SplitMode mode) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw_validation("test fraction must lie in (0,1)");
  }
  if (subjects.size() != labels.size()) throw_validation("labels and subjects differ in length");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw_validation("class " + std::to_string(label) + " has fewer than 2 samples");
    }
  }

  std::vector<bool> is_test(labels.size(), false);
  if (mode == SplitMode::stratified) {
    for (auto& [label, members] : by_class) {
      Rng rng = Rng::stream(seed, Substream::split, static_cast<std::uint64_t>(label));
      rng.shuffle(members);
      const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * members.size()));
      for (std::size_t k = 0; k < n_test; ++k) is_test[members[k]] = true;
    }
  } else {
    std::set<std::string> unique(subjects.begin(), subjects.end());
    if (unique.size() < 2) throw_validation("subject-exclusive split needs at least 2 subjects");
    std::vector<std::string> order(unique.begin(), unique.end());
    Rng rng = Rng::stream(seed, Substream::split, 0xFFFF);
    rng.shuffle(order);
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * order.size()));
    const std::set<std::string> test_subjects(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    for (std::size_t i = 0; i < labels.size(); ++i) is_test[i] = test_subjects.count(subjects[i]) > 0;
  }

  SplitIndices out;
  for (std::size_t i = 0; i < labels.size(); ++i) (is_test[i] ? out.test : out.train).push_back(i);
  return out;
}

std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> split(
    std::span<const LabeledSample> samples, double test_fraction, std::uint64_t seed, SplitMode mode) {
  std::vector<int> labels;
  std::vector<std::string> subjects;
  for (const auto& s : samples) {
    labels.push_back(s.label);
    subjects.push_back(s.subject);
  }
  const auto idx = split_indices(labels, subjects, test_fraction, seed, mode);
  std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> out;
  for (auto i : idx.train) out.first.push_back(samples[i]);
  for (auto i : idx.test) out.second.push_back(samples[i]);
  return out;
}

std::vector<LabeledSample> generate_synthetic(int classes, int per_class, int size, std::uint64_t seed) {
  if (classes < 2 || per_class < 2 || size < 16) {
    throw_validation("synthetic corpus needs classes >= 2, per_class >= 2, size >= 16");
  }
  constexpr double kAmplitude = 0.35;
  constexpr double kNoise = 0.05;
  constexpr double kJitterDeg = 5.0;
  const double scale = size / 48.0;

  std::vector<LabeledSample> out;
  out.reserve(static_cast<std::size_t>(classes) * per_class);
  for (int k = 0; k < classes; ++k) {
    const double period = scale * 3.0 * std::pow(6.0, static_cast<double>(k) / (classes - 1));
    const double base = k * std::numbers::pi / classes;
    for (int i = 0; i < per_class; ++i) {
      Rng rng = Rng::stream(seed, Substream::synth, static_cast<std::uint64_t>(k) * per_class + i);
      const double theta = base + rng.uniform(-kJitterDeg, kJitterDeg) * std::numbers::pi / 180.0;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      GrayImage img(size, size);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double d = x * c + y * s;
          double v = 0.5 + kAmplitude * std::sin(2.0 * std::numbers::pi * d / period + phase) +
                     kNoise * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          img.at(x, y) = std::round(v * 255.0) / 255.0;
        }
      }
      out.push_back(LabeledSample{std::move(img), k, "S" + std::to_string(i % 10)});
    }
  }
  return out;
}

}  // namespace mfer
