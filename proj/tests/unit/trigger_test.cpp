#include <gtest/gtest.h>

#include "exray/error.hpp"
#include "exray/rng.hpp"
#include "exray/trigger.hpp"
#include "test_models.hpp"

using namespace exray;
using exray::testing::random_tensor;

namespace {

constexpr std::size_t kPlane = 16 * 16;

// Linear three-class model over flattened 3x16x16 inputs. Class 0 has a
// constant logit of 5. Class 1 fires when the top-left pixel is bright in
// every channel (a one-pixel backdoor) or when red outweighs blue across the
// image (a colour backdoor). Class 2 is unreachable.
ModelGraph planted_model(bool colour_backdoor) {
  ModelGraph m;
  m.id = "planted";
  m.input_shape = {3, 16, 16};
  m.class_count = 3;
  LayerSpec dense = LayerSpec::dense(3 * kPlane, 3);
  dense.bias[0] = 5.0f;
  dense.bias[2] = -100.0f;
  if (colour_backdoor) {
    for (std::size_t i = 0; i < kPlane; ++i) {
      dense.weight[1 * 3 * kPlane + i] = 30.0f / kPlane;
      dense.weight[1 * 3 * kPlane + 2 * kPlane + i] = -30.0f / kPlane;
    }
  } else {
    for (std::size_t c = 0; c < 3; ++c) dense.weight[1 * 3 * kPlane + c * kPlane] = 20.0f;
    dense.bias[1] = -40.0f;
  }
  m.layers = {LayerSpec::flatten(), dense};
  return m;
}

std::vector<Tensor> victims(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t n = 0; n < count; ++n) {
    Tensor x = random_tensor({3, 16, 16}, rng, 0.3, 0.7);
    for (std::size_t c = 0; c < 3; ++c) x[c * kPlane] = 0.0f;
    out.push_back(std::move(x));
  }
  return out;
}

ScanConfig fast_config() {
  ScanConfig cfg;
  cfg.re_epochs = 300;
  cfg.filter_epochs = 200;
  return cfg;
}

}  // namespace

TEST(ApplyTrigger, PatchBlendsMaskAndPattern) {
  Rng rng(1);
  const Tensor x = random_tensor({3, 16, 16}, rng);
  const Tensor pattern = random_tensor({3, 16, 16}, rng);
  EXPECT_EQ(apply_trigger(x, TriggerCandidate::patch(0, 1, Tensor({16, 16}, 0.0f), pattern)), x);
  EXPECT_EQ(apply_trigger(x, TriggerCandidate::patch(0, 1, Tensor({16, 16}, 1.0f), pattern)), pattern);
  Tensor mask({16, 16}, 0.0f);
  mask[5] = 0.25f;
  const Tensor y = apply_trigger(x, TriggerCandidate::patch(0, 1, mask, pattern));
  EXPECT_FLOAT_EQ(y[kPlane + 5], 0.75f * x[kPlane + 5] + 0.25f * pattern[kPlane + 5]);
  EXPECT_EQ(y[6], x[6]);
}

TEST(ApplyTrigger, FilterIsAffineAndClamped) {
  Rng rng(2);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng);
  EXPECT_EQ(apply_trigger(x, TriggerCandidate::filter(0, 1, ColorTransform{})), x);
  ColorTransform swap;
  swap.matrix = {0, 0, 1, 0, 1, 0, 1, 0, 0};
  swap.bias = {0, 0, 2};
  const Tensor y = apply_trigger(x, TriggerCandidate::filter(0, 1, swap));
  EXPECT_EQ(y[kPlane * 3 + 7], x[kPlane * 3 + 2 * kPlane + 7]);
  EXPECT_EQ(y[2 * kPlane + 7], 1.0f);
}

TEST(ApplyTrigger, RejectsMismatchedShapes) {
  const Tensor x({3, 16, 16});
  EXPECT_THROW(apply_trigger(x, TriggerCandidate::patch(0, 1, Tensor({8, 8}), Tensor({3, 8, 8}))), Error);
  EXPECT_THROW(apply_trigger(Tensor({1, 16, 16}), TriggerCandidate::filter(0, 1, {})), Error);
}

TEST(AttackSuccessRate, CountsTargetPredictions) {
  const ModelGraph model = planted_model(false);
  const auto xs = victims(10, 3);
  Tensor mask({16, 16}, 0.0f);
  const Tensor pattern({3, 16, 16}, 1.0f);
  EXPECT_EQ(attack_success_rate(model, TriggerCandidate::patch(0, 1, mask, pattern), xs), 0.0);
  mask[0] = 1.0f;
  EXPECT_EQ(attack_success_rate(model, TriggerCandidate::patch(0, 1, mask, pattern), xs), 1.0);
  EXPECT_EQ(attack_success_rate(model, TriggerCandidate::patch(0, 2, mask, pattern), xs), 0.0);
}

TEST(ReversePatch, RecoversPlantedPixel) {
  const ModelGraph model = planted_model(false);
  const auto xs = victims(20, 4);
  const auto found = reverse_patch(model, xs, 0, 1, fast_config());
  ASSERT_TRUE(found.has_value());
  EXPECT_EQ(found->kind, TriggerKind::patch);
  EXPECT_GE(found->asr, 0.9);
  EXPECT_LE(*found->size_px, 3.0);
  EXPECT_GT(found->pixel_mask[0], 0.5f);
}

TEST(ReversePatch, UnreachableTargetYieldsNothing) {
  const ModelGraph model = planted_model(false);
  const auto xs = victims(10, 5);
  EXPECT_FALSE(reverse_patch(model, xs, 0, 2, fast_config()).has_value());
}

TEST(ReversePatch, IsDeterministic) {
  const ModelGraph model = planted_model(false);
  const auto xs = victims(10, 6);
  ScanConfig cfg = fast_config();
  cfg.re_epochs = 60;
  const auto a = reverse_patch(model, xs, 0, 1, cfg), b = reverse_patch(model, xs, 0, 1, cfg);
  ASSERT_EQ(a.has_value(), b.has_value());
  if (a) {
    EXPECT_EQ(a->pixel_mask, b->pixel_mask);
    EXPECT_EQ(a->pattern, b->pattern);
  }
}

TEST(ReverseFilter, RecoversColourShift) {
  const ModelGraph model = planted_model(true);
  const auto xs = victims(20, 7);
  const auto found = reverse_filter(model, xs, 0, 1, fast_config());
  ASSERT_TRUE(found.has_value());
  EXPECT_EQ(found->kind, TriggerKind::filter);
  EXPECT_GE(found->asr, 0.9);
  EXPECT_GE(*found->ssim_score, 0.8);
  EXPECT_NEAR(*found->ssim_score, mean_ssim(*found, xs), 1e-12);
}

TEST(ReverseFilter, UnreachableTargetYieldsNothing) {
  const ModelGraph model = planted_model(true);
  const auto xs = victims(10, 8);
  EXPECT_FALSE(reverse_filter(model, xs, 0, 2, fast_config()).has_value());
}

TEST(EnumerateCandidates, SortedAndLimitedToReachablePairs) {
  const ModelGraph model = planted_model(false);
  SampleSet samples;
  samples.image_shape = {3, 16, 16};
  samples.class_names = {"a", "b", "c"};
  for (Tensor& x : victims(10, 9)) {
    samples.images.push_back(std::move(x));
    samples.labels.push_back(0);
  }
  ScanConfig cfg = fast_config();
  cfg.scan_filter = false;
  cfg.jobs = 2;
  const auto found = enumerate_candidates(model, samples, cfg);
  ASSERT_EQ(found.size(), 1u);
  EXPECT_EQ(found[0].victim, 0u);
  EXPECT_EQ(found[0].target, 1u);
}

TEST(ScanConfig, RejectsOutOfRangeBounds) {
  ScanConfig cfg;
  cfg.ssim_bound = 1.5;
  EXPECT_THROW(validate_scan_config(cfg), Error);
  cfg = ScanConfig{};
  cfg.asr_threshold = 0.0;
  EXPECT_THROW(validate_scan_config(cfg), Error);
}
