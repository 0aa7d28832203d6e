#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "exray/tensor.hpp"

namespace exray {

struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Zeroed moments shaped like `params`.
AdamState make_adam_state(std::span<const Tensor* const> params, double lr);
AdamState make_adam_state(std::span<const Tensor> params, double lr);

/// One bias-corrected Adam update applied in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state);
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

}  // namespace exray
