#include "exray/ssim.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "exray/error.hpp"

namespace exray {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size * size);
  const double centre = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - centre, dx = static_cast<double>(x) - centre;
      w[y * size + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[y * size + x];
    }
  }
  for (double& v : w) v /= total;
  return w;
}

double ssim_impl(const Tensor& a, const Tensor& b, Tensor* grad_b) {
  if (a.shape() != b.shape() || a.rank() != 3) {
    throw Error(ErrorCode::shape_mismatch, "ssim expects two equally shaped C x H x W images, got " +
                                               shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t channels = a.dim(0), height = a.dim(1), width = a.dim(2);
  std::size_t win = std::min<std::size_t>({11, height, width});
  if (win % 2 == 0) --win;
  if (win == 0) throw Error(ErrorCode::shape_mismatch, "ssim: empty image");
  const std::vector<double> w = gaussian_window(win, 1.5);
  const std::size_t rows = height - win + 1, cols = width - win + 1;
  const double positions = static_cast<double>(rows * cols * channels);
  if (grad_b != nullptr) *grad_b = Tensor(b.shape());

  double total = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* pa = a.data() + c * height * width;
    const float* pb = b.data() + c * height * width;
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x = 0; x < cols; ++x) {
        double mu_a = 0, mu_b = 0, e_aa = 0, e_bb = 0, e_ab = 0;
        for (std::size_t i = 0; i < win; ++i) {
          for (std::size_t j = 0; j < win; ++j) {
            const double wt = w[i * win + j];
            const double va = pa[(y + i) * width + x + j], vb = pb[(y + i) * width + x + j];
            mu_a += wt * va;
            mu_b += wt * vb;
            e_aa += wt * (va * va);
            e_bb += wt * (vb * vb);
            e_ab += wt * (va * vb);
          }
        }
        const double var_a = e_aa - mu_a * mu_a;
        const double var_b = e_bb - mu_b * mu_b;
        const double cov = e_ab - mu_a * mu_b;
        const double a1 = 2.0 * mu_a * mu_b + kC1, a2 = 2.0 * cov + kC2;
        const double b1 = mu_a * mu_a + mu_b * mu_b + kC1, b2 = var_a + var_b + kC2;
        const double denom = b1 * b2;
        const double s = (a1 * a2) / denom;
        total += s;
        if (grad_b != nullptr) {
          // Partial derivatives of s with respect to the windowed statistics of b.
          const double d_mu_b = (2.0 * mu_a * a2 - 2.0 * mu_a * a1) / denom - s * (2.0 * mu_b * b2 - 2.0 * mu_b * b1) / denom;
          const double d_e_bb = -s * b1 / denom;
          const double d_e_ab = 2.0 * a1 / denom;
          float* g = grad_b->data() + c * height * width;
          for (std::size_t i = 0; i < win; ++i) {
            for (std::size_t j = 0; j < win; ++j) {
              const std::size_t idx = (y + i) * width + x + j;
              const double wt = w[i * win + j] / positions;
              g[idx] += static_cast<float>(wt * (d_mu_b + 2.0 * pb[idx] * d_e_bb + pa[idx] * d_e_ab));
            }
          }
        }
      }
    }
  }
  return total / positions;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) { return ssim_impl(a, b, nullptr); }

double ssim_with_grad(const Tensor& a, const Tensor& b, Tensor& grad_b) { return ssim_impl(a, b, &grad_b); }

}  // namespace exray
