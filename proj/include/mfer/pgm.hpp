#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mfer/error.hpp"
#include "mfer/image.hpp"

namespace mfer {

enum class PgmErrorKind { malformed_header, unsupported_maxval, truncated_payload };

/// Decoding failure with the byte offset where it was detected.
class PgmDecodeError : public ValidationError {
 public:
  PgmDecodeError(PgmErrorKind kind, std::size_t offset, const std::string& detail);
  PgmErrorKind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  PgmErrorKind kind_;
  std::size_t offset_;
};

/// Binary PGM (P5, maxval 255). Intensities come back as pixel/255.
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);

/// Writes P5 with maxval 255 and a single newline after the maxval.
/// Values are clamped to [0,1] and rounded to the nearest 8-bit level.
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mfer
