#pragma once

#include <cstddef>
#include <span>

#include "exray/tensor.hpp"

namespace exray {

/// -log softmax(logits)[label] for a single logit vector. When `grad` is
/// non-empty it receives d/dlogits = softmax - onehot.
double cross_entropy(std::span<const float> logits, std::size_t label, std::span<float> grad = {});

double cross_entropy(const Tensor& logits, std::size_t label);

/// Mean cross entropy over an N x K batch; `grad` (optional, N x K) gets the
/// gradient of the mean.
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* grad = nullptr);

}  // namespace exray
