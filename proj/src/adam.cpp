#include "exray/adam.hpp"

#include <cmath>

#include "exray/error.hpp"

namespace exray {

AdamState make_adam_state(std::span<const Tensor* const> params, double lr) {
  AdamState state;
  state.lr = lr;
  for (const Tensor* p : params) {
    state.first_moment.emplace_back(p->shape());
    state.second_moment.emplace_back(p->shape());
  }
  return state;
}

AdamState make_adam_state(std::span<const Tensor> params, double lr) {
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : params) ptrs.push_back(&p);
  return make_adam_state(std::span<const Tensor* const>(ptrs), lr);
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw Error(ErrorCode::shape_mismatch, "adam: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.first_moment[i].shape()) {
      throw Error(ErrorCode::shape_mismatch, "adam: shape mismatch at parameter " + std::to_string(i));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = state.lr * (mj / correction1) / (std::sqrt(vj / correction2) + state.epsilon);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
}

void adam_step(Tensor& param, const Tensor& grad, AdamState& state) {
  Tensor* p = &param;
  const Tensor* g = &grad;
  adam_step(std::span<Tensor* const>(&p, 1), std::span<const Tensor* const>(&g, 1), state);
}

}  // namespace exray
