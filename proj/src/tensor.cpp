#include "mfer/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mfer/error.hpp"

namespace mfer {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw_validation("negative tensor extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

Tensor::Tensor(std::vector<int> shape_in, double fill)
    : shape(std::move(shape_in)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> values)
    : shape(std::move(shape_in)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw_validation("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
}

std::size_t Tensor::row_size() const {
  if (shape.empty() || shape[0] == 0) return 0;
  return data.size() / static_cast<std::size_t>(shape[0]);
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<double>(data).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const double>(data).subspan(i * n, n);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool all_finite(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mfer
