#include "mfer/kernels.hpp"

namespace mfer::kernels::detail {

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double squared_distance(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

void relu(const double* in, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
}

void relu_backward(const double* in, const double* dout, double* din, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) din[i] = in[i] > 0.0 ? dout[i] : 0.0;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable t{Isa::scalar, dot, axpy, squared_distance, relu, relu_backward};
  return t;
}

}  // namespace mfer::kernels::detail
