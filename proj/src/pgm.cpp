#include "mfer/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace mfer {

namespace {

const char* kind_name(PgmErrorKind kind) {
  switch (kind) {
    case PgmErrorKind::malformed_header: return "malformed header";
    case PgmErrorKind::unsupported_maxval: return "unsupported maxval";
    case PgmErrorKind::truncated_payload: return "truncated payload";
  }
  return "pgm error";
}

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  long read_number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000'000) {
        throw PgmDecodeError(PgmErrorKind::malformed_header, start, std::string(what) + " too large");
      }
      ++pos_;
    }
    if (pos_ == start) {
      throw PgmDecodeError(PgmErrorKind::malformed_header, start, std::string("expected ") + what);
    }
    return value;
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_end() const { return pos_ >= bytes_.size(); }
  std::uint8_t peek() const { return bytes_[pos_]; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

PgmDecodeError::PgmDecodeError(PgmErrorKind kind, std::size_t offset, const std::string& detail)
    : ValidationError(std::string("PGM ") + kind_name(kind) + " at byte " + std::to_string(offset) +
                      ": " + detail),
      kind_(kind),
      offset_(offset) {}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw PgmDecodeError(PgmErrorKind::malformed_header, 0, "missing P5 magic");
  }
  HeaderReader reader(bytes.subspan(2));
  // Offsets point at the first byte of each header token.
  const auto token_offset = [&] {
    reader.skip_space_and_comments();
    return 2 + reader.pos();
  };
  const std::size_t width_offset = token_offset();
  const long width = reader.read_number("width");
  const std::size_t height_offset = token_offset();
  const long height = reader.read_number("height");
  const std::size_t maxval_offset = token_offset();
  const long maxval = reader.read_number("maxval");
  if (width < 1 || height < 1) {
    throw PgmDecodeError(PgmErrorKind::malformed_header, width < 1 ? width_offset : height_offset,
                         "zero image extent");
  }
  if (maxval != 255) {
    throw PgmDecodeError(PgmErrorKind::unsupported_maxval, maxval_offset,
                         "maxval " + std::to_string(maxval) + " (only 255 is supported)");
  }
  if (reader.at_end() || !is_space(reader.peek())) {
    throw PgmDecodeError(PgmErrorKind::malformed_header, 2 + reader.pos(),
                         "expected a single whitespace after maxval");
  }
  reader.advance();
  const std::size_t payload = 2 + reader.pos();
  const std::size_t need = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - payload < need) {
    throw PgmDecodeError(PgmErrorKind::truncated_payload, bytes.size(),
                         "expected " + std::to_string(need) + " pixel bytes, found " +
                             std::to_string(bytes.size() - payload));
  }
  std::vector<double> values(need);
  for (std::size_t i = 0; i < need; ++i) values[i] = bytes[payload + i] / 255.0;
  return GrayImage(static_cast<int>(width), static_cast<int>(height), std::move(values));
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (double v : img.data) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0)));
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_pgm(bytes);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  write_file_bytes(path, encode_pgm(img));
}

}  // namespace mfer
