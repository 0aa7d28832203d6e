#include "exray/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "exray/error.hpp"

namespace exray {

double cross_entropy(std::span<const float> logits, std::size_t label, std::span<float> grad) {
  if (label >= logits.size()) {
    throw Error(ErrorCode::validation, "label " + std::to_string(label) + " out of range for " +
                                           std::to_string(logits.size()) + " classes");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (float z : logits) total += std::exp(static_cast<double>(z) - peak);
  const double log_norm = peak + std::log(total);
  if (!grad.empty()) {
    for (std::size_t k = 0; k < logits.size(); ++k) {
      const double p = std::exp(static_cast<double>(logits[k]) - log_norm);
      grad[k] = static_cast<float>(p - (k == label ? 1.0 : 0.0));
    }
  }
  return log_norm - static_cast<double>(logits[label]);
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw Error(ErrorCode::shape_mismatch, "expected 1-D logits");
  return cross_entropy(logits.values(), label);
}

double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw Error(ErrorCode::shape_mismatch, "logits " + shape_string(logits.shape()) + " vs " +
                                               std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (grad != nullptr && grad->shape() != logits.shape()) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < rows; ++n) {
    std::span<const float> row(logits.data() + n * classes, classes);
    std::span<float> grow;
    if (grad != nullptr) grow = std::span<float>(grad->data() + n * classes, classes);
    total += cross_entropy(row, labels[n], grow);
  }
  if (grad != nullptr) {
    const float scale = 1.0f / static_cast<float>(rows);
    for (float& g : grad->values()) g *= scale;
  }
  return total / static_cast<double>(rows);
}

}  // namespace exray
