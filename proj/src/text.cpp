#include "mfer/text.hpp"

#include <array>
#include <charconv>

namespace mfer {

std::string format_real(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

}  // namespace mfer
