#include <cstdlib>
#include <string_view>

#include "mfer/error.hpp"
#include "mfer/kernels.hpp"

namespace mfer::kernels {

const char* to_string(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

const KernelTable& scalar_table() { return detail::scalar_kernels(); }

namespace {

bool cpu_has(Isa isa) {
  switch (isa) {
    case Isa::scalar: return true;
    case Isa::avx2:
#if defined(MFER_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(MFER_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& choose() {
  const auto isas = available();
  if (const char* forced = std::getenv("MFER_KERNELS")) {
    const std::string_view want(forced);
    for (Isa isa : isas) {
      if (want == to_string(isa)) return table(isa);
    }
  }
  return table(isas.back());
}

}  // namespace

std::vector<Isa> available() {
  std::vector<Isa> out{Isa::scalar};
  for (Isa isa : {Isa::avx2, Isa::neon}) {
    if (cpu_has(isa)) out.push_back(isa);
  }
  return out;
}

const KernelTable& table(Isa isa) {
  if (!cpu_has(isa)) throw Error(std::string("kernel variant not available: ") + to_string(isa));
  switch (isa) {
#if defined(MFER_HAVE_AVX2)
    case Isa::avx2: return detail::avx2_kernels();
#endif
#if defined(MFER_HAVE_NEON)
    case Isa::neon: return detail::neon_kernels();
#endif
    default: return detail::scalar_kernels();
  }
}

const KernelTable& active() {
  static const KernelTable& t = choose();
  return t;
}

}  // namespace mfer::kernels
