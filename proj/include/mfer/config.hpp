#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mfer/dataset.hpp"
#include "mfer/preprocess.hpp"
#include "mfer/training.hpp"

namespace mfer {

enum class InferenceMode { multicrop, nearest_feature };

const char* to_string(InferenceMode m);
InferenceMode parse_inference_mode(std::string_view text);

/// Everything a CLI run can be configured with.
struct RunConfig {
  TrainConfig train;
  std::string profile = "cnn-fusion";
  HomomorphicParams homomorphic;
  SplitMode split_mode = SplitMode::stratified;
  double test_fraction = 0.2;
  std::string manifest;
  std::string data_dir;
  std::string out = ".";
  std::string checkpoint;
  std::string predictions;
  InferenceMode inference_mode = InferenceMode::multicrop;
  /// Save a checkpoint every k epochs during training; 0 saves only at the end.
  int checkpoint_every = 0;

  /// Value checks that do not touch the filesystem.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every settable key, in documentation order.
const std::vector<ConfigKey>& config_keys();

/// Throws ValidationError for unknown keys and unparsable values.
void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value);

/// Grammar, one entry per line:
///   line    := blank | comment | entry
///   comment := '#' any*
///   entry   := key '=' value [comment]
/// Whitespace around keys and values is ignored. Repeated keys are an error.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text);

/// Applies a parsed config file on top of `cfg`.
void apply_config_text(RunConfig& cfg, std::string_view text);

/// All keys as `key = value` lines, readable by apply_config_text.
std::string format_config(const RunConfig& cfg);

}  // namespace mfer
