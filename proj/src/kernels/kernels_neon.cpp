// AArch64 only; NEON is part of the base ISA there.

#include <arm_neon.h>

#include "mfer/kernels.hpp"

namespace mfer::kernels::detail {

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double squared_distance(const double* a, const double* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t d = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    acc = vfmaq_f64(acc, d, d);
  }
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void relu(const double* in, double* out, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t v = vld1q_f64(in + i);
    const uint64x2_t keep = vcgtq_f64(v, zero);
    vst1q_f64(out + i, vreinterpretq_f64_u64(vandq_u64(keep, vreinterpretq_u64_f64(v))));
  }
  for (; i < n; ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
}

void relu_backward(const double* in, const double* dout, double* din, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const uint64x2_t keep = vcgtq_f64(vld1q_f64(in + i), zero);
    vst1q_f64(din + i, vreinterpretq_f64_u64(vandq_u64(keep, vreinterpretq_u64_f64(vld1q_f64(dout + i)))));
  }
  for (; i < n; ++i) din[i] = in[i] > 0.0 ? dout[i] : 0.0;
}

}  // namespace

const KernelTable& neon_kernels() {
  static const KernelTable t{Isa::neon, dot, axpy, squared_distance, relu, relu_backward};
  return t;
}

}  // namespace mfer::kernels::detail
