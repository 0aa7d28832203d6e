#include <gtest/gtest.h>

#include <cmath>

#include "exray/error.hpp"
#include "exray/rng.hpp"
#include "exray/ssim.hpp"
#include "test_models.hpp"

using namespace exray;
using exray::testing::random_tensor;

TEST(Ssim, IdenticalImagesScoreExactlyOne) {
  Rng rng(3);
  const Tensor x = random_tensor({3, 16, 16}, rng);
  EXPECT_EQ(ssim(x, x), 1.0);
}

TEST(Ssim, IsSymmetric) {
  Rng rng(4);
  const Tensor a = random_tensor({3, 16, 16}, rng), b = random_tensor({3, 16, 16}, rng);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_LT(ssim(a, b), 0.5);
}

TEST(Ssim, ConstantImagesMatchClosedForm) {
  const double p = 0.3, q = 0.7, c1 = 1e-4;
  const Tensor a({1, 12, 12}, static_cast<float>(p)), b({1, 12, 12}, static_cast<float>(q));
  const double pf = static_cast<float>(p), qf = static_cast<float>(q);
  EXPECT_NEAR(ssim(a, b), (2 * pf * qf + c1) / (pf * pf + qf * qf + c1), 1e-9);
}

TEST(Ssim, InvertedImageScoresLow) {
  Rng rng(5);
  const Tensor x = random_tensor({3, 16, 16}, rng);
  Tensor inv(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) inv[i] = 1.0f - x[i];
  EXPECT_LT(ssim(x, inv), 0.0);
}

TEST(Ssim, SmallImagesShrinkTheWindow) {
  Rng rng(6);
  const Tensor x = random_tensor({3, 4, 6}, rng);
  EXPECT_EQ(ssim(x, x), 1.0);
  EXPECT_THROW(ssim(x, Tensor({3, 6, 4})), Error);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const Tensor a = random_tensor({3, 16, 16}, rng);
  Tensor b = random_tensor({3, 16, 16}, rng);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.5f * a[i] + 0.5f * b[i];
  Tensor grad;
  const double value = ssim_with_grad(a, b, grad);
  EXPECT_EQ(value, ssim(a, b));
  for (int trial = 0; trial < 20; ++trial) {
    const auto i = static_cast<std::size_t>(uniform(rng, 0, static_cast<double>(b.size())));
    const float saved = b[i];
    const float h = 1e-3f;
    b[i] = saved + h;
    const double up = ssim(a, b);
    b[i] = saved - h;
    const double down = ssim(a, b);
    b[i] = saved;
    const double numeric = (up - down) / ((static_cast<double>(saved + h) - static_cast<double>(saved - h)));
    EXPECT_NEAR(grad[i], numeric, 1e-3 * std::max(1e-2, std::abs(numeric))) << "coordinate " << i;
  }
}
