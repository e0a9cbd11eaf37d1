#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfer/image.hpp"

namespace mfer {

/// Canonical JAFFE expression codes in label-index order (alphabetical).
const std::vector<std::string>& jaffe_classes();

struct LabeledSample {
  GrayImage image;
  int label = 0;
  std::string subject;
};

struct ManifestEntry {
  std::string path;
  std::string label;
  std::string subject;
};

/// Parsed `path,label,subject` CSV. `class_names` order is the label-index map.
struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;

  /// Index of `name` in class_names; throws ValidationError if absent.
  int label_index(std::string_view name) const;
};

struct JaffeName {
  int label = 0;
  std::string subject;
};

/// Parses `<SUBJ>.<EXPR><n>.<id>.<ext>`, e.g. "KA.AN1.39.pgm" -> (index of AN, "KA").
JaffeName parse_jaffe_name(std::string_view filename, std::span<const std::string> class_names);

/// Header line `path,label,subject` is required. An optional `# classes: a,b,c`
/// comment fixes the class order; otherwise the sorted label set is used.
Manifest load_manifest(std::string_view text);
std::string format_manifest(const Manifest& manifest);

enum class SplitMode { stratified, subject_exclusive };

const char* to_string(SplitMode mode);
SplitMode parse_split_mode(std::string_view text);

/// Indices into the input, each list ascending.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified mode: per class, round(test_fraction * n_class) samples go to
/// test. Subject-exclusive mode: round(test_fraction * n_subjects) whole
/// subjects go to test. Every class needs at least two samples.
SplitIndices split_indices(std::span<const int> labels, std::span<const std::string> subjects,
                           double test_fraction, std::uint64_t seed,
                           SplitMode mode = SplitMode::stratified);

std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> split(
    std::span<const LabeledSample> samples, double test_fraction, std::uint64_t seed,
    SplitMode mode = SplitMode::stratified);

/// Deterministic CI corpus of `classes` texture families.
///
/// Each sample is a sinusoidal grating, 0.5 + 0.35*sin(2*pi*d/period + phase),
/// plus Gaussian noise with standard deviation 0.05, clamped to [0,1] and
/// quantized to 8 bits so it survives a PGM round trip. Class k fixes both the
/// period, on a geometric ladder from 3 to 18 pixels (scaled with `size`/48),
/// and the base orientation k*pi/classes (jittered by +-5 degrees). The
/// orientation makes upright samples separable under HOG; the period keeps
/// classes apart under the +-45 degree training rotations.
std::vector<LabeledSample> generate_synthetic(int classes, int per_class, int size,
                                              std::uint64_t seed);

}  // namespace mfer
