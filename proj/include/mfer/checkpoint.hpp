#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mfer/network.hpp"
#include "mfer/preprocess.hpp"

namespace mfer {

/// Checkpoint layout:
///
///   MFEDRL1\n
///   arch <descriptor>\n
///   classes <name>,<name>,...\n
///   meta <key> <value>\n              (zero or more)
///   pixel_stats <w> <h> <epsilon>\n   (optional)
///   tensor <name> <d0>x<d1>...\n      (one per payload tensor)
///   end\n
///   <little-endian float32 payloads in manifest order>
///
/// Payload tensors: every parameter, then momentum.<param>, then centers,
/// then pixel_stats.mean and pixel_stats.std when present.
std::vector<std::uint8_t> encode_checkpoint(const ModelState& m);
ModelState decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelState& m);
ModelState load_checkpoint(const std::filesystem::path& path);

/// Standalone pixel statistics file (same container, magic MFSTATS1).
std::vector<std::uint8_t> encode_pixel_stats(const PixelStats& s);
PixelStats decode_pixel_stats(std::span<const std::uint8_t> bytes);

/// Rounds every value through float32, as storage does.
PixelStats round_to_float(PixelStats s);

}  // namespace mfer
