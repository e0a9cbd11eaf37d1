#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mfer::kernels {

enum class Isa { scalar, avx2, neon };

const char* to_string(Isa isa);

/// Inner loops of the network and the distance scans. Every variant computes
/// the same mathematical result; reductions may round differently.
struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  /// y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  /// sum (a - b)^2
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
  /// out = max(in, 0)
  void (*relu)(const double* in, double* out, std::size_t n);
  /// din = in > 0 ? dout : 0
  void (*relu_backward)(const double* in, const double* dout, double* din, std::size_t n);
};

const KernelTable& scalar_table();

/// Variants that are both compiled in and supported by this CPU, scalar first.
std::vector<Isa> available();
const KernelTable& table(Isa isa);

/// Best available variant, chosen once. Setting MFER_KERNELS=scalar (or avx2,
/// neon) in the environment forces a specific one when it is available.
const KernelTable& active();

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  return active().squared_distance(a.data(), b.data(), a.size());
}

namespace detail {
// Defined in the per-ISA translation units.
const KernelTable& scalar_kernels();
#if defined(MFER_HAVE_AVX2)
const KernelTable& avx2_kernels();
#endif
#if defined(MFER_HAVE_NEON)
const KernelTable& neon_kernels();
#endif
}  // namespace detail

}  // namespace mfer::kernels
