#include "mfer/config.hpp"

#include <charconv>
#include <set>

#include "mfer/error.hpp"
#include "mfer/text.hpp"

namespace mfer {

const char* to_string(InferenceMode m) {
  return m == InferenceMode::multicrop ? "multicrop" : "nearest-feature";
}

InferenceMode parse_inference_mode(std::string_view text) {
  if (text == "multicrop") return InferenceMode::multicrop;
  if (text == "nearest-feature") return InferenceMode::nearest_feature;
  throw ValidationError("unknown inference mode '" + std::string(text) + "' (multicrop, nearest-feature)");
}

void RunConfig::validate() const {
  train.validate();
  homomorphic.validate();
  if (profile != "cnn-fusion" && profile != "mlp-handcrafted") {
    throw ValidationError("unknown profile '" + profile + "' (cnn-fusion, mlp-handcrafted)");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("test_fraction must lie in (0,1)");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ValidationError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

ConfigKey int_key(std::string name, std::string help, std::function<int&(RunConfig&)> ref) {
  ConfigKey k;
  k.name = name;
  k.help = std::move(help);
  k.set = [name, ref](RunConfig& c, const std::string& v) { ref(c) = parse_number<int>(name, v); };
  k.get = [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); };
  return k;
}

ConfigKey real_key(std::string name, std::string help, std::function<double&(RunConfig&)> ref) {
  ConfigKey k;
  k.name = name;
  k.help = std::move(help);
  k.set = [name, ref](RunConfig& c, const std::string& v) { ref(c) = parse_number<double>(name, v); };
  k.get = [ref](const RunConfig& c) { return format_real(ref(const_cast<RunConfig&>(c))); };
  return k;
}

ConfigKey text_key(std::string name, std::string help, std::function<std::string&(RunConfig&)> ref) {
  ConfigKey k;
  k.name = std::move(name);
  k.help = std::move(help);
  k.set = [ref](RunConfig& c, const std::string& v) { ref(c) = v; };
  k.get = [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); };
  return k;
}

std::vector<ConfigKey> make_keys() {
  std::vector<ConfigKey> keys;
  keys.push_back(int_key("batch_size", "mini-batch size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
  keys.push_back(real_key("momentum", "SGD momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
  keys.push_back(real_key("lr", "initial learning rate", [](RunConfig& c) -> double& { return c.train.lr; }));
  keys.push_back(real_key("lr_drop_factor", "learning-rate divisor on a plateau",
                          [](RunConfig& c) -> double& { return c.train.lr_drop_factor; }));
  keys.push_back(int_key("plateau_patience", "epochs without improvement before a drop",
                         [](RunConfig& c) -> int& { return c.train.plateau_patience; }));
  keys.push_back(int_key("max_epochs", "epoch limit", [](RunConfig& c) -> int& { return c.train.max_epochs; }));
  keys.push_back(real_key("dropout_p", "dropout probability before the head",
                          [](RunConfig& c) -> double& { return c.train.dropout_p; }));
  keys.push_back(real_key("lambda_center", "center-loss weight",
                          [](RunConfig& c) -> double& { return c.train.lambda_center; }));
  keys.push_back(real_key("alpha_center", "center update rate",
                          [](RunConfig& c) -> double& { return c.train.alpha_center; }));
  keys.push_back(real_key("loss_epsilon", "stop once the mean epoch loss falls below this",
                          [](RunConfig& c) -> double& { return c.train.loss_epsilon; }));
  {
    ConfigKey k;
    k.name = "seed";
    k.help = "run seed";
    k.set = [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); };
    k.get = [](const RunConfig& c) { return std::to_string(c.train.seed); };
    keys.push_back(std::move(k));
  }
  keys.push_back(int_key("workers", "worker threads (never changes results)",
                         [](RunConfig& c) -> int& { return c.train.workers; }));
  keys.push_back(text_key("profile", "cnn-fusion or mlp-handcrafted", [](RunConfig& c) -> std::string& { return c.profile; }));
  keys.push_back(real_key("gamma_low", "homomorphic illumination gain",
                          [](RunConfig& c) -> double& { return c.homomorphic.gamma_low; }));
  keys.push_back(real_key("gamma_high", "homomorphic reflectance gain",
                          [](RunConfig& c) -> double& { return c.homomorphic.gamma_high; }));
  keys.push_back(real_key("sigma_frac", "homomorphic blur sigma as a fraction of min(width, height)",
                          [](RunConfig& c) -> double& { return c.homomorphic.sigma_frac; }));
  {
    ConfigKey k;
    k.name = "split_mode";
    k.help = "stratified or subject-exclusive";
    k.set = [](RunConfig& c, const std::string& v) { c.split_mode = parse_split_mode(v); };
    k.get = [](const RunConfig& c) { return std::string(to_string(c.split_mode)); };
    keys.push_back(std::move(k));
  }
  keys.push_back(real_key("test_fraction", "held-out fraction", [](RunConfig& c) -> double& { return c.test_fraction; }));
  keys.push_back(text_key("manifest", "input manifest CSV", [](RunConfig& c) -> std::string& { return c.manifest; }));
  keys.push_back(text_key("data_dir", "preprocessed data directory",
                          [](RunConfig& c) -> std::string& { return c.data_dir; }));
  keys.push_back(text_key("out", "output directory", [](RunConfig& c) -> std::string& { return c.out; }));
  keys.push_back(text_key("checkpoint", "checkpoint file", [](RunConfig& c) -> std::string& { return c.checkpoint; }));
  keys.push_back(text_key("predictions", "external predictions CSV (path,predicted_label)",
                          [](RunConfig& c) -> std::string& { return c.predictions; }));
  {
    ConfigKey k;
    k.name = "inference_mode";
    k.help = "multicrop or nearest-feature";
    k.set = [](RunConfig& c, const std::string& v) { c.inference_mode = parse_inference_mode(v); };
    k.get = [](const RunConfig& c) { return std::string(to_string(c.inference_mode)); };
    keys.push_back(std::move(k));
  }
  keys.push_back(int_key("checkpoint_every", "save every k epochs (0: only at the end)",
                         [](RunConfig& c) -> int& { return c.checkpoint_every; }));
  return keys;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ValidationError("unknown config key '" + std::string(key) + "'");
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second) {
      throw ValidationError("config line " + std::to_string(lineno) + ": key '" + key + "' repeated");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

void apply_config_text(RunConfig& cfg, std::string_view text) {
  for (const auto& [k, v] : parse_config_text(text)) set_config_value(cfg, k, v);
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace mfer
