// mfer: batch front-end for the micro-facial-expression toolkit.
//
// Configuration precedence: command-line flag > --config file > default.
// Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mfer/checkpoint.hpp"
#include "mfer/config.hpp"
#include "mfer/dataset.hpp"
#include "mfer/error.hpp"
#include "mfer/evaluation.hpp"
#include "mfer/features.hpp"
#include "mfer/network.hpp"
#include "mfer/pgm.hpp"
#include "mfer/pipeline.hpp"
#include "mfer/training.hpp"

namespace fs = std::filesystem;
using namespace mfer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

const char* kPreprocessInfo = "preprocess.cfg";
const char* kStatsFile = "pixel_stats.bin";

std::string read_text(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& p, const std::string& text) {
  write_file_bytes(p, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct LoadedManifest {
  Manifest manifest;
  fs::path base;  // relative entry paths resolve against this directory
};

LoadedManifest read_manifest(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("manifest not found: " + p.string());
  return {load_manifest(read_text(p)), p.parent_path()};
}

fs::path resolve(const LoadedManifest& m, const std::string& entry_path) {
  const fs::path e(entry_path);
  return e.is_absolute() ? e : m.base / e;
}

std::vector<LabeledSample> read_samples(const LoadedManifest& m) {
  std::vector<LabeledSample> out;
  for (const auto& e : m.manifest.entries) {
    LabeledSample s;
    s.image = read_pgm(resolve(m, e.path));
    s.label = m.manifest.label_index(e.label);
    s.subject = e.subject;
    out.push_back(std::move(s));
  }
  return out;
}

fs::path data_file(const RunConfig& cfg, const char* name) {
  if (cfg.data_dir.empty()) throw ValidationError(std::string("--data_dir is required to locate ") + name);
  return fs::path(cfg.data_dir) / name;
}

fs::path manifest_or(const RunConfig& cfg, const char* data_dir_default) {
  if (!cfg.manifest.empty()) return cfg.manifest;
  return data_file(cfg, data_dir_default);
}

fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? fs::path(cfg.out) / "model.ckpt" : fs::path(cfg.checkpoint);
}

/// Stored 48x48 image -> model input, with a resize when the file is not 48x48.
GrayImage to_model_input(GrayImage img, const ModelState& m) {
  if (!m.pixel_stats) throw ValidationError("checkpoint carries no pixel statistics");
  if (img.width != kStoredSize || img.height != kStoredSize) img = bilinear_resize(img, kStoredSize, kStoredSize);
  return normalize_for_model(img, *m.pixel_stats);
}

std::vector<LabeledSample> model_inputs(std::vector<LabeledSample> samples, const ModelState& m) {
  for (auto& s : samples) s.image = to_model_input(std::move(s.image), m);
  return samples;
}

void require_class_match(const Manifest& manifest, const ModelState& m) {
  if (manifest.class_names != m.class_names) {
    throw ValidationError("manifest classes do not match the checkpoint's classes");
  }
}

Manifest with_entries(const Manifest& like, std::vector<ManifestEntry> entries) {
  Manifest m;
  m.class_names = like.class_names;
  m.entries = std::move(entries);
  return m;
}

// ---------------------------------------------------------------- commands

int cmd_ingest(const RunConfig& cfg, const std::string& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir);
  const fs::path out_dir(cfg.out);
  fs::create_directories(out_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Manifest m;
  m.class_names = jaffe_classes();
  int skipped = 0;
  for (const auto& f : files) {
    try {
      const auto name = parse_jaffe_name(f.filename().string(), m.class_names);
      const auto rel = fs::absolute(f).lexically_normal().lexically_relative(fs::absolute(out_dir).lexically_normal());
      m.entries.push_back({rel.generic_string(), m.class_names[static_cast<std::size_t>(name.label)], name.subject});
    } catch (const ValidationError& e) {
      std::cerr << "warning: skipping " << f.filename().string() << ": " << e.what() << "\n";
      ++skipped;
    }
  }
  if (m.entries.empty()) throw ValidationError("no JAFFE-named files in " + dir);
  write_text(out_dir / "manifest.csv", format_manifest(m));
  std::cout << "ingested " << m.entries.size() << " images (" << skipped << " skipped) into "
            << (out_dir / "manifest.csv").string() << "\n";
  return kExitOk;
}

int cmd_synth(const RunConfig& cfg, int classes, int per_class, int size) {
  const auto samples = generate_synthetic(classes, per_class, size, cfg.train.seed);
  const fs::path out_dir(cfg.out);
  fs::create_directories(out_dir / "images");
  Manifest m;
  if (classes == static_cast<int>(jaffe_classes().size())) {
    m.class_names = jaffe_classes();
  } else {
    for (int k = 0; k < classes; ++k) m.class_names.push_back("C" + std::to_string(k));
  }
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (const auto& s : samples) {
    const auto& label = m.class_names[static_cast<std::size_t>(s.label)];
    char name[64];
    std::snprintf(name, sizeof name, "%s_%03d.pgm", label.c_str(), seen[static_cast<std::size_t>(s.label)]++);
    write_pgm(out_dir / "images" / name, s.image);
    m.entries.push_back({std::string("images/") + name, label, s.subject});
  }
  write_text(out_dir / "manifest.csv", format_manifest(m));
  std::cout << "wrote " << samples.size() << " synthetic images to " << (out_dir / "manifest.csv").string() << "\n";
  return kExitOk;
}

int cmd_preprocess(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw ValidationError("--manifest is required");
  const auto in = read_manifest(cfg.manifest);
  if (in.manifest.entries.empty()) throw ValidationError("manifest has no entries");

  const fs::path out_dir(cfg.out);
  std::vector<ManifestEntry> kept;
  std::vector<GrayImage> stored;
  std::set<std::string> outputs;
  int skipped = 0;
  for (const auto& e : in.manifest.entries) {
    fs::path rel = fs::path("images") / fs::path(e.path).filename();
    rel.replace_extension(".pgm");
    if (!outputs.insert(rel.generic_string()).second) {
      throw ValidationError("two manifest entries map to the same output " + rel.generic_string());
    }
    GrayImage raw;
    try {
      raw = read_pgm(resolve(in, e.path));
    } catch (const std::exception& ex) {
      std::cerr << "warning: skipping " << e.path << ": " << ex.what() << "\n";
      ++skipped;
      continue;
    }
    // Keep exactly what lands on disk so statistics match later reads.
    const auto bytes = encode_pgm(prepare_image(raw, cfg.homomorphic));
    fs::create_directories((out_dir / rel).parent_path());
    write_file_bytes(out_dir / rel, bytes);
    stored.push_back(decode_pgm(bytes));
    kept.push_back({rel.generic_string(), e.label, e.subject});
  }
  if (kept.empty()) throw ValidationError("no readable images in the manifest");

  std::vector<int> labels;
  std::vector<std::string> subjects;
  for (const auto& e : kept) {
    labels.push_back(in.manifest.label_index(e.label));
    subjects.push_back(e.subject);
  }
  const auto parts = split_indices(labels, subjects, cfg.test_fraction, cfg.train.seed, cfg.split_mode);
  std::vector<ManifestEntry> train_entries;
  std::vector<ManifestEntry> test_entries;
  std::vector<GrayImage> train_images;
  for (auto i : parts.train) {
    train_entries.push_back(kept[i]);
    train_images.push_back(stored[i]);
  }
  for (auto i : parts.test) test_entries.push_back(kept[i]);

  const PixelStats stats = round_to_float(fit_normalization(train_images));
  write_text(out_dir / "manifest.csv", format_manifest(with_entries(in.manifest, kept)));
  write_text(out_dir / "train.csv", format_manifest(with_entries(in.manifest, train_entries)));
  write_text(out_dir / "test.csv", format_manifest(with_entries(in.manifest, test_entries)));
  write_file_bytes(out_dir / kStatsFile, encode_pixel_stats(stats));

  RunConfig info;
  info.homomorphic = cfg.homomorphic;
  info.split_mode = cfg.split_mode;
  info.test_fraction = cfg.test_fraction;
  info.train.seed = cfg.train.seed;
  std::string text;
  for (const char* key : {"gamma_low", "gamma_high", "sigma_frac", "split_mode", "test_fraction", "seed"}) {
    for (const auto& k : config_keys()) {
      if (k.name == key) text += k.name + " = " + k.get(info) + "\n";
    }
  }
  write_text(out_dir / kPreprocessInfo, text);

  std::cout << "preprocessed " << kept.size() << " images (" << train_entries.size() << " train, "
            << test_entries.size() << " test)";
  if (skipped) std::cout << ", skipped " << skipped;
  std::cout << "\n";
  return skipped ? kExitRuntime : kExitOk;
}

int cmd_features(const RunConfig& cfg) {
  const auto in = read_manifest(manifest_or(cfg, "manifest.csv"));
  const fs::path out_dir(cfg.out);
  fs::create_directories(out_dir);
  std::string csv;
  std::vector<Segment> layout;
  for (const auto& e : in.manifest.entries) {
    GrayImage img = read_pgm(resolve(in, e.path));
    if (img.width != kStoredSize || img.height != kStoredSize) img = bilinear_resize(img, kStoredSize, kStoredSize);
    const auto d = handcrafted_descriptor(crop_regions(center_crop(img)));
    if (layout.empty()) {
      layout = d.layout;
      csv += "path,label";
      for (const auto& s : d.layout)
        for (std::size_t i = 0; i < s.length; ++i) csv += "," + s.name + "." + std::to_string(i);
      csv += "\n";
    }
    csv += e.path + "," + e.label;
    char buf[32];
    for (double v : d.values) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      csv += buf;
    }
    csv += "\n";
  }
  write_text(out_dir / "features.csv", csv);
  std::string seg = "segment,offset,length\n";
  for (const auto& s : layout) seg += s.name + "," + std::to_string(s.offset) + "," + std::to_string(s.length) + "\n";
  write_text(out_dir / "features_layout.csv", seg);
  std::cout << "wrote descriptors for " << in.manifest.entries.size() << " images to "
            << (out_dir / "features.csv").string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
  const auto in = read_manifest(manifest_or(cfg, "train.csv"));
  const PixelStats stats = decode_pixel_stats(read_file_bytes(data_file(cfg, kStatsFile)));
  const fs::path out_dir(cfg.out);
  fs::create_directories(out_dir);
  const fs::path ckpt = checkpoint_path(cfg);

  ModelState model = init_model(
      make_arch(cfg.profile, static_cast<int>(in.manifest.class_names.size()), cfg.train.dropout_p), cfg.train.seed);
  model.pixel_stats = stats;
  model.class_names = in.manifest.class_names;
  const fs::path info = data_file(cfg, kPreprocessInfo);
  if (fs::exists(info)) {
    for (const auto& [k, v] : parse_config_text(read_text(info))) model.meta["preprocess." + k] = v;
  }
  model.meta["profile"] = cfg.profile;
  model.meta["seed"] = std::to_string(cfg.train.seed);

  const auto samples = model_inputs(read_samples(in), model);
  TrainHooks hooks;
  hooks.on_epoch = [&](const ModelState& m, const TrainLog& log) {
    const auto& e = log.epochs.back();
    std::fprintf(stderr, "epoch %d loss %.6f ce %.6f center %.4f lr %g (%.1fs)\n", e.epoch, e.loss, e.ce, e.center,
                 e.lr, e.seconds);
    if (cfg.checkpoint_every > 0 && e.epoch % cfg.checkpoint_every == 0) save_checkpoint(ckpt, m);
  };
  const TrainResult r = train(std::move(model), samples, cfg.train, hooks);
  save_checkpoint(ckpt, r.model);
  write_text(out_dir / "train_log.csv", r.log.to_csv());
  std::cout << "training stopped (" << to_string(r.status) << ") after " << r.log.epochs.size() << " epochs; checkpoint "
            << ckpt.string() << "\n";
  if (r.status == TrainStatus::numeric_failure) {
    std::cerr << "error: " << r.message << "; kept the last good state\n";
    return kExitRuntime;
  }
  return kExitOk;
}

ReportProtocol protocol_for(const RunConfig& cfg, std::string inference, std::string profile,
                            std::vector<std::string> classes) {
  RunConfig used = cfg;
  if (!cfg.data_dir.empty()) {
    const fs::path info = fs::path(cfg.data_dir) / kPreprocessInfo;
    if (fs::exists(info)) apply_config_text(used, read_text(info));
  }
  ReportProtocol p;
  p.split_mode = to_string(used.split_mode);
  p.seed = used.train.seed;
  p.inference_mode = std::move(inference);
  p.profile = std::move(profile);
  p.class_names = std::move(classes);
  return p;
}

int write_reports(const RunConfig& cfg, const std::vector<int>& truth, const std::vector<int>& pred,
                  const ReportProtocol& protocol) {
  const fs::path out_dir(cfg.out);
  fs::create_directories(out_dir);
  const auto cm = confusion(truth, pred, static_cast<int>(protocol.class_names.size()));
  const auto report = metrics(cm);
  write_text(out_dir / "metrics.json", metrics_json(report, protocol));
  write_text(out_dir / "confusion.csv", confusion_csv(cm, protocol.class_names));
  std::printf("accuracy_ovr_macro %.6f\naccuracy_trace %.6f\nmae %.6f\n", report.accuracy_ovr_macro,
              report.accuracy_trace, report.mae);
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg) {
  const auto in = read_manifest(manifest_or(cfg, "test.csv"));
  if (in.manifest.entries.empty()) throw ValidationError("evaluation manifest has no entries");
  if (!cfg.predictions.empty()) {
    const auto preds = parse_predictions_csv(read_text(cfg.predictions));
    const auto [truth, pred] = match_predictions(in.manifest, preds);
    return write_reports(cfg, truth, pred, protocol_for(cfg, "external", "external", in.manifest.class_names));
  }

  const ModelState model = load_checkpoint(checkpoint_path(cfg));
  require_class_match(in.manifest, model);
  const auto samples = model_inputs(read_samples(in), model);
  std::vector<int> truth;
  std::vector<int> pred;
  std::vector<GrayImage> images;
  for (const auto& s : samples) {
    truth.push_back(s.label);
    images.push_back(s.image);
  }
  if (cfg.inference_mode == InferenceMode::multicrop) {
    for (const auto& p : multicrop_predict(model, images, cfg.train.workers)) pred.push_back(p.label);
  } else {
    const auto gallery_manifest = read_manifest(data_file(cfg, "train.csv"));
    require_class_match(gallery_manifest.manifest, model);
    const auto gallery = build_gallery(model, model_inputs(read_samples(gallery_manifest), model), cfg.train.workers);
    const Tensor feats = extract_features(model, images, cfg.train.workers);
    for (std::size_t i = 0; i < images.size(); ++i) pred.push_back(nearest_feature(feats.row(i), gallery).label);
  }
  return write_reports(cfg, truth, pred,
                       protocol_for(cfg, to_string(cfg.inference_mode), model.arch.profile, model.class_names));
}

int cmd_predict(const RunConfig& cfg, const std::string& image_path, bool raw) {
  const ModelState model = load_checkpoint(checkpoint_path(cfg));
  GrayImage img = read_pgm(image_path);
  if (raw) {
    HomomorphicParams hp;
    const auto get = [&](const char* key, double fallback) {
      const auto it = model.meta.find(std::string("preprocess.") + key);
      return it == model.meta.end() ? fallback : std::stod(it->second);
    };
    hp.gamma_low = get("gamma_low", hp.gamma_low);
    hp.gamma_high = get("gamma_high", hp.gamma_high);
    hp.sigma_frac = get("sigma_frac", hp.sigma_frac);
    img = prepare_image(img, hp);
  }
  const GrayImage input = to_model_input(std::move(img), model);
  if (cfg.inference_mode == InferenceMode::multicrop) {
    const auto p = multicrop_predict(model, input);
    std::printf("%s %.6f\n", model.class_names[static_cast<std::size_t>(p.label)].c_str(),
                p.probs[static_cast<std::size_t>(p.label)]);
  } else {
    const auto gallery_manifest = read_manifest(manifest_or(cfg, "train.csv"));
    require_class_match(gallery_manifest.manifest, model);
    const auto gallery = build_gallery(model, model_inputs(read_samples(gallery_manifest), model), cfg.train.workers);
    const auto match = nearest_feature_predict(model, input, gallery);
    std::printf("%s %.6f\n", model.class_names[static_cast<std::size_t>(match.label)].c_str(), match.distance);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mfer: micro-facial-expression recognition toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  app.add_option("--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
  std::map<std::string, std::string> flags;
  for (const auto& k : config_keys()) {
    std::string names = "--" + k.name;
    if (k.name.find('_') != std::string::npos) {
      std::string dashed = k.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      names += ",--" + dashed;
    }
    app.add_option(names, flags[k.name], k.help);
  }

  auto* ingest = app.add_subcommand("ingest", "build a manifest from a directory of JAFFE-named PGM files");
  std::string ingest_dir;
  ingest->add_option("dir", ingest_dir, "image directory")->required();

  auto* synth = app.add_subcommand("synth", "generate the synthetic texture corpus");
  int synth_classes = 7;
  int synth_per_class = 50;
  int synth_size = 48;
  synth->add_option("--classes", synth_classes, "number of classes")->check(CLI::Range(2, 64));
  synth->add_option("--per-class", synth_per_class, "images per class")->check(CLI::Range(2, 100000));
  synth->add_option("--size", synth_size, "image side in pixels")->check(CLI::Range(16, 4096));

  auto* preprocess = app.add_subcommand("preprocess", "enhance, resize, split and fit pixel statistics");
  auto* features = app.add_subcommand("features", "write LBP/HOG region descriptors");
  auto* train_cmd = app.add_subcommand("train", "train a model on the preprocessed train split");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or an external predictions file");

  auto* predict = app.add_subcommand("predict", "classify one PGM image");
  std::string predict_image;
  bool predict_raw = false;
  predict->add_option("image", predict_image, "PGM image")->required();
  predict->add_flag("--raw", predict_raw, "run the enhancement stage first (input is an unprocessed image)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_text(cfg, read_text(config_file));
    for (const auto& k : config_keys()) {
      if (app.count("--" + k.name) > 0) k.set(cfg, flags[k.name]);
    }
    cfg.validate();

    if (ingest->parsed()) return cmd_ingest(cfg, ingest_dir);
    if (synth->parsed()) return cmd_synth(cfg, synth_classes, synth_per_class, synth_size);
    if (preprocess->parsed()) return cmd_preprocess(cfg);
    if (features->parsed()) return cmd_features(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (predict->parsed()) return cmd_predict(cfg, predict_image, predict_raw);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
