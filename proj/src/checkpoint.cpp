#include "mfer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>
#include <string>
#include <string_view>

#include "mfer/error.hpp"
#include "mfer/text.hpp"
#include "mfer/pgm.hpp"

namespace mfer {

namespace {

constexpr std::string_view kCheckpointMagic = "MFEDRL1\n";
constexpr std::string_view kStatsMagic = "MFSTATS1\n";

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  const std::vector<double>* values = nullptr;
};

void put_float(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

double get_float(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::vector<std::uint8_t> encode_container(std::string_view magic, const std::string& header,
                                           const std::vector<NamedTensor>& tensors) {
  std::string text(magic);
  text += header;
  for (const auto& t : tensors) text += "tensor " + t.name + " " + shape_string(t.shape) + "\n";
  text += "end\n";
  std::vector<std::uint8_t> out(text.begin(), text.end());
  for (const auto& t : tensors) {
    for (double v : *t.values) put_float(out, v);
  }
  return out;
}

struct Container {
  std::vector<std::string> lines;  // header lines other than tensor entries
  std::vector<std::pair<std::string, std::vector<int>>> manifest;
  std::vector<std::vector<double>> payloads;
};

std::vector<int> parse_shape(const std::string& s) {
  std::vector<int> shape;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t x = s.find('x', start);
    const std::string part = s.substr(start, x == std::string::npos ? std::string::npos : x - start);
    try {
      shape.push_back(std::stoi(part));
    } catch (const std::logic_error&) {
      throw ValidationError("checkpoint: bad tensor shape '" + s + "'");
    }
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return shape;
}

Container decode_container(std::string_view magic, std::span<const std::uint8_t> bytes) {
  if (bytes.size() < magic.size() || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
    throw ValidationError("not a " + std::string(magic.substr(0, magic.size() - 1)) + " file");
  }
  Container c;
  std::size_t pos = magic.size();
  bool ended = false;
  while (pos < bytes.size()) {
    std::size_t nl = pos;
    while (nl < bytes.size() && bytes[nl] != '\n') ++nl;
    if (nl == bytes.size()) break;
    std::string line(reinterpret_cast<const char*>(bytes.data()) + pos, nl - pos);
    pos = nl + 1;
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.starts_with("tensor ")) {
      std::istringstream in(line.substr(7));
      std::string name, shape;
      if (!(in >> name >> shape)) throw ValidationError("checkpoint: bad tensor line '" + line + "'");
      c.manifest.emplace_back(name, parse_shape(shape));
    } else {
      c.lines.push_back(std::move(line));
    }
  }
  if (!ended) throw ValidationError("checkpoint: header has no 'end' line");
  for (const auto& [name, shape] : c.manifest) {
    const std::size_t n = shape_size(shape);
    if (bytes.size() - pos < 4 * n) throw ValidationError("checkpoint: payload truncated at tensor " + name);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = get_float(bytes.data() + pos + 4 * i);
    pos += 4 * n;
    c.payloads.push_back(std::move(values));
  }
  if (pos != bytes.size()) throw ValidationError("checkpoint: trailing bytes after payload");
  return c;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

class PayloadCursor {
 public:
  explicit PayloadCursor(Container& c) : c_(c) {}

  std::vector<double> take(const std::string& name, const std::vector<int>& shape) {
    if (next_ >= c_.manifest.size() || c_.manifest[next_].first != name) {
      throw ValidationError("checkpoint: expected tensor " + name + " (architecture mismatch)");
    }
    if (c_.manifest[next_].second != shape) {
      throw ValidationError("checkpoint: tensor " + name + " has shape " + shape_string(c_.manifest[next_].second) +
                            ", architecture expects " + shape_string(shape));
    }
    return std::move(c_.payloads[next_++]);
  }

  bool done() const { return next_ == c_.manifest.size(); }

 private:
  Container& c_;
  std::size_t next_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelState& m) {
  if (static_cast<int>(m.class_names.size()) != m.num_classes()) {
    throw ValidationError("checkpoint: model needs one class name per output");
  }
  std::string header = "arch " + m.arch.descriptor + "\n";
  header += "classes " + join(m.class_names) + "\n";
  for (const auto& [k, v] : m.meta) header += "meta " + k + " " + v + "\n";
  if (m.pixel_stats) {
    const auto& s = *m.pixel_stats;
    header += "pixel_stats " + std::to_string(s.width) + " " + std::to_string(s.height) + " " +
              format_real(s.epsilon) + "\n";
  }
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    tensors.push_back({m.plan.params[i].name, m.params[i].shape, &m.params[i].data});
  }
  for (std::size_t i = 0; i < m.momentum.size(); ++i) {
    tensors.push_back({"momentum." + m.plan.params[i].name, m.momentum[i].shape, &m.momentum[i].data});
  }
  tensors.push_back({"centers", m.centers.shape, &m.centers.data});
  if (m.pixel_stats) {
    const auto& s = *m.pixel_stats;
    tensors.push_back({"pixel_stats.mean", {s.height, s.width}, &s.mean});
    tensors.push_back({"pixel_stats.std", {s.height, s.width}, &s.std});
  }
  return encode_container(kCheckpointMagic, header, tensors);
}

ModelState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Container c = decode_container(kCheckpointMagic, bytes);
  std::string arch_text;
  std::vector<std::string> classes;
  std::map<std::string, std::string> meta;
  std::optional<PixelStats> stats;
  for (const auto& line : c.lines) {
    if (line.starts_with("arch ")) {
      arch_text = line.substr(5);
    } else if (line.starts_with("classes ")) {
      classes = split_list(line.substr(8));
    } else if (line.starts_with("meta ")) {
      const std::string rest = line.substr(5);
      const auto sp = rest.find(' ');
      meta[rest.substr(0, sp)] = sp == std::string::npos ? "" : rest.substr(sp + 1);
    } else if (line.starts_with("pixel_stats ")) {
      std::istringstream in(line.substr(12));
      PixelStats s;
      std::string eps;
      if (!(in >> s.width >> s.height >> eps)) throw ValidationError("checkpoint: bad pixel_stats line");
      s.epsilon = std::stod(eps);
      stats = std::move(s);
    } else {
      throw ValidationError("checkpoint: unknown header line '" + line + "'");
    }
  }
  if (arch_text.empty()) throw ValidationError("checkpoint: missing arch line");

  ModelState m(parse_arch(arch_text));
  if (static_cast<int>(classes.size()) != m.num_classes()) {
    throw ValidationError("checkpoint: class list length does not match the architecture");
  }
  m.class_names = std::move(classes);
  m.meta = std::move(meta);
  PayloadCursor cur(c);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    m.params[i].data = cur.take(m.plan.params[i].name, m.params[i].shape);
  }
  for (std::size_t i = 0; i < m.momentum.size(); ++i) {
    m.momentum[i].data = cur.take("momentum." + m.plan.params[i].name, m.momentum[i].shape);
  }
  m.centers.data = cur.take("centers", m.centers.shape);
  if (stats) {
    stats->mean = cur.take("pixel_stats.mean", {stats->height, stats->width});
    stats->std = cur.take("pixel_stats.std", {stats->height, stats->width});
    m.pixel_stats = std::move(stats);
  }
  if (!cur.done()) throw ValidationError("checkpoint: unexpected extra tensors");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& m) {
  // Write-then-rename so an interrupted save never clobbers the previous checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, encode_checkpoint(m));
  std::filesystem::rename(tmp, path);
}

ModelState load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_pixel_stats(const PixelStats& s) {
  const std::string header = "pixel_stats " + std::to_string(s.width) + " " + std::to_string(s.height) + " " +
                             format_real(s.epsilon) + "\n";
  return encode_container(kStatsMagic, header,
                          {{"mean", {s.height, s.width}, &s.mean}, {"std", {s.height, s.width}, &s.std}});
}

PixelStats decode_pixel_stats(std::span<const std::uint8_t> bytes) {
  Container c = decode_container(kStatsMagic, bytes);
  PixelStats s;
  bool have = false;
  for (const auto& line : c.lines) {
    if (!line.starts_with("pixel_stats ")) continue;
    std::istringstream in(line.substr(12));
    std::string eps;
    if (!(in >> s.width >> s.height >> eps)) throw ValidationError("stats: bad header");
    s.epsilon = std::stod(eps);
    have = true;
  }
  if (!have) throw ValidationError("stats: missing pixel_stats line");
  PayloadCursor cur(c);
  s.mean = cur.take("mean", {s.height, s.width});
  s.std = cur.take("std", {s.height, s.width});
  return s;
}

PixelStats round_to_float(PixelStats s) {
  for (double& v : s.mean) v = static_cast<double>(static_cast<float>(v));
  for (double& v : s.std) v = static_cast<double>(static_cast<float>(v));
  return s;
}

}  // namespace mfer
