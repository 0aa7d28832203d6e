#include "exray/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "exray/error.hpp"

namespace exray {

std::size_t shape_product(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_product(shape_) != values_.size()) {
    throw Error(ErrorCode::shape_mismatch, "shape " + shape_string(shape_) + " does not hold " +
                                               std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), values_);
}

void Tensor::fill(float value) noexcept { std::fill(values_.begin(), values_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

double Tensor::sum() const noexcept {
  double total = 0.0;
  for (float v : values_) total += v;
  return total;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw Error(ErrorCode::shape_mismatch, "cannot stack an empty list");
  const Shape& inner = items.front().shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const std::size_t stride = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != inner) {
      throw Error(ErrorCode::shape_mismatch, "stack item " + std::to_string(i) + " has shape " +
                                                 shape_string(items[i].shape()) + ", expected " +
                                                 shape_string(inner));
    }
    std::copy(items[i].data(), items[i].data() + stride, out.data() + i * stride);
  }
  return out;
}

Shape sample_shape(const Tensor& batch) {
  if (batch.rank() == 0) throw Error(ErrorCode::shape_mismatch, "tensor has no batch axis");
  return Shape(batch.shape().begin() + 1, batch.shape().end());
}

Tensor batch_item(const Tensor& batch, std::size_t index) {
  Shape inner = sample_shape(batch);
  if (index >= batch.dim(0)) throw Error(ErrorCode::shape_mismatch, "batch index out of range");
  const std::size_t stride = shape_product(inner);
  std::vector<float> values(batch.data() + index * stride, batch.data() + (index + 1) * stride);
  return Tensor(std::move(inner), std::move(values));
}

}  // namespace exray
