#pragma once

#include "exray/tensor.hpp"

namespace exray {

/// Mean structural similarity of two C x H x W images (dynamic range 1):
/// 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, evaluated at
/// every position where the window fits and averaged over channels.
/// Images smaller than the window shrink it to the largest odd size that fits.
double ssim(const Tensor& a, const Tensor& b);

/// Same value as ssim(a, b); also writes d ssim / d b into `grad_b`.
double ssim_with_grad(const Tensor& a, const Tensor& b, Tensor& grad_b);

}  // namespace exray
