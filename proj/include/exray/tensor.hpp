#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace exray {

using Shape = std::vector<std::size_t>;

std::size_t shape_product(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

/// Dense row-major float32 array. Invariant: shape_product(shape) == size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

  [[nodiscard]] float* data() noexcept { return values_.data(); }
  [[nodiscard]] const float* data() const noexcept { return values_.data(); }
  [[nodiscard]] std::span<float> values() noexcept { return values_; }
  [[nodiscard]] std::span<const float> values() const noexcept { return values_; }

  float& operator[](std::size_t i) noexcept { return values_[i]; }
  float operator[](std::size_t i) const noexcept { return values_[i]; }

  /// Same values under a new shape of equal element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const;
  void fill(float value) noexcept;

  [[nodiscard]] bool all_finite() const noexcept;
  [[nodiscard]] double sum() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> values_;
};

/// Stacks equally shaped tensors along a new leading batch axis.
Tensor stack(std::span<const Tensor> items);
/// Sample `index` of a batched tensor, without the batch axis.
Tensor batch_item(const Tensor& batch, std::size_t index);
/// Shape of one sample in a batched tensor.
Shape sample_shape(const Tensor& batch);

}  // namespace exray
