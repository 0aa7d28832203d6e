#include <gtest/gtest.h>

#include "../support/gradcheck.hpp"
#include "test_models.hpp"
#include "../support/synthetic.hpp"
#include "exray/differencing.hpp"
#include "exray/error.hpp"
#include "exray/loss.hpp"

using exray::testing::random_tensor;

using namespace exray;
using namespace exray::testing;

namespace {

DiffConfig with_mode(DiffMode mode) {
  DiffConfig cfg;
  cfg.mode = mode;
  cfg.seed = 17;
  return cfg;
}

double off_support_sum(const FeatureMask& mask, const std::vector<std::size_t>& key) {
  double total = 0.0;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (std::find(key.begin(), key.end(), c) == key.end()) total += mask[c];
  }
  return total;
}

}  // namespace

TEST(Blend, AllOnesAllZerosAndHalf) {
  Rng rng(1);
  const Tensor a = random_tensor({4, 3, 3}, rng), b = random_tensor({4, 3, 3}, rng);
  EXPECT_EQ(blend(a, b, FeatureMask({4}, 1.0f)), a);
  EXPECT_EQ(blend(a, b, FeatureMask({4}, 0.0f)), b);
  const Tensor half = blend(a, b, FeatureMask({4}, 0.5f));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_FLOAT_EQ(half[i], 0.5f * a[i] + 0.5f * b[i]);
}

TEST(Blend, MixesPerChannel) {
  const Tensor a({2}, {1.0f, 2.0f}), b({2}, {10.0f, 20.0f});
  EXPECT_EQ(blend(a, b, FeatureMask({2}, {1.0f, 0.0f})), Tensor({2}, {1.0f, 20.0f}));
}

TEST(Blend, LengthMismatchThrows) {
  EXPECT_THROW(blend(Tensor({4, 2, 2}), Tensor({4, 2, 2}), FeatureMask({3})), Error);
  EXPECT_THROW(blend(Tensor({4}), Tensor({5}), FeatureMask({4})), Error);
}

TEST(PairLoss, AllOnesOnCorrectPairIsSizePlusSmallCrossEntropy) {
  const SyntheticPair p = channel_model(3, 8, 1);
  const DiffConfig cfg;
  const PairLoss pl = pair_loss(p.h, p.feat_a, p.feat_b, FeatureMask({8}, 1.0f), 0, 1, cfg);
  const Tensor logits_a = forward(p.h, p.feat_a), logits_b = forward(p.h, p.feat_b);
  const double ce1 = cross_entropy(logits_a, std::vector<std::size_t>{0});
  const double ce2 = cross_entropy(logits_b, std::vector<std::size_t>{1});
  ASSERT_LT(ce1, cfg.alpha);
  ASSERT_LT(ce2, cfg.alpha);
  EXPECT_NEAR(pl.loss, 1.0 + cfg.w_small * (ce1 + ce2), 1e-12);
  EXPECT_EQ(pl.flip_acc_forward, 1.0);
  EXPECT_EQ(pl.flip_acc_backward, 1.0);
}

TEST(PairLoss, AllZerosOnSeparatedPairUsesLargeWeights) {
  const SyntheticPair p = channel_model(4, 8, 1);
  const DiffConfig cfg;
  const PairLoss pl = pair_loss(p.h, p.feat_a, p.feat_b, FeatureMask({8}, 0.0f), 0, 1, cfg);
  EXPECT_GT(pl.ce1, cfg.alpha);
  EXPECT_GT(pl.ce2, cfg.alpha);
  EXPECT_NEAR(pl.loss, cfg.w_large * (pl.ce1 + pl.ce2), 1e-9);
  EXPECT_EQ(pl.flip_acc_forward, 0.0);
}

TEST(PairLoss, SingleDifferingChannelMinimisesAtUnitVector) {
  // Two-class linear head over n = 4 where only channel 2 separates the classes.
  const Tensor fv({1, 4}, {0.3f, 0.7f, 1.0f, 0.5f}), ft({1, 4}, {0.6f, 0.2f, 0.0f, 0.9f});
  LayerSpec dense = LayerSpec::dense(4, 2);
  dense.weight[2] = 6.0f;
  dense.weight[4 + 2] = -6.0f;
  dense.bias[0] = -3.0f;
  dense.bias[1] = 3.0f;
  const std::vector<LayerSpec> h{dense};
  double best = 1e300;
  std::uint32_t best_bits = 0;
  for (std::uint32_t bits = 0; bits < 16; ++bits) {
    FeatureMask m({4});
    for (std::size_t c = 0; c < 4; ++c) m[c] = (bits >> c) & 1u ? 1.0f : 0.0f;
    const double loss = pair_loss(h, fv, ft, m, 0, 1, DiffConfig{}).loss;
    if (loss < best) {
      best = loss;
      best_bits = bits;
    }
  }
  EXPECT_EQ(best_bits, 1u << 2);
}

TEST(PairLoss, MaskGradientMatchesFiniteDifferences) {
  for (DiffMode mode : {DiffMode::symmetric, DiffMode::one_sided_v_to_t, DiffMode::one_sided_t_to_v}) {
    const GradCheck g = check_pair_loss_mask_gradient(91, mode);
    EXPECT_EQ(g.checked, g.wanted) << diff_mode_name(mode);
    EXPECT_LT(g.worst, kGradientTolerance) << diff_mode_name(mode);
  }
}

TEST(Pairing, RandomPairingIsCanonicalUnderLabelSwap) {
  const auto ab = make_pairs(7, 5, 2, 4, 9, Pairing::random);
  const auto ba = make_pairs(5, 7, 4, 2, 9, Pairing::random);
  ASSERT_EQ(ab.size(), 5u);
  ASSERT_EQ(ba.size(), 5u);
  for (std::size_t j = 0; j < ab.size(); ++j) {
    EXPECT_EQ(ab[j].first, ba[j].second);
    EXPECT_EQ(ab[j].second, ba[j].first);
  }
}

TEST(Pairing, IdentityNeedsEqualSizes) {
  EXPECT_EQ(make_pairs(3, 3, 0, 1, 0, Pairing::identity)[2], (std::pair<std::size_t, std::size_t>{2, 2}));
  EXPECT_THROW(make_pairs(3, 4, 0, 1, 0, Pairing::identity), Error);
}

TEST(OptimizeMask, SameLabelIsRejected) {
  const SyntheticPair p = channel_model(5);
  try {
    (void)optimize_mask_features(p.h, p.feat_a, 0, p.feat_a, 0, DiffConfig{}, Pairing::identity);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::precondition);
  }
}

TEST(OptimizeMask, TooFewSamplesIsRejected) {
  const SyntheticPair p = channel_model(5, 8, 1);
  try {
    (void)optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, DiffConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::insufficient_samples);
  }
}

TEST(OptimizeMask, RecoversSeparatingChannelAgainstExhaustiveOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SyntheticPair p = channel_model(seed);
    const DiffConfig cfg = with_mode(DiffMode::symmetric);
    const MaskResult r = optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, cfg);
    const BinaryOracle oracle = exhaustive_oracle(p, cfg);
    ASSERT_EQ(oracle.minimal, std::vector<std::uint32_t>{1u << p.key[0]}) << "seed " << seed;
    EXPECT_TRUE(r.feasible);
    EXPECT_GT(r.mask[p.key[0]], 0.9f) << "seed " << seed;
    EXPECT_LT(off_support_sum(r.mask, p.key), 0.5) << "seed " << seed;
    EXPECT_TRUE(covers_minimum(r.mask, oracle));
    EXPECT_LE(r.mask_sum, 1.5 * static_cast<double>(oracle.min_size));
  }
}

TEST(OptimizeMask, ReportedAccuraciesMatchIndependentRecomputation) {
  for (DiffMode mode : {DiffMode::symmetric, DiffMode::one_sided_v_to_t, DiffMode::one_sided_t_to_v}) {
    for (std::uint64_t seed : {1u, 2u}) {
      for (const SyntheticPair& p : {channel_model(seed), suppression_model(seed)}) {
        const DiffConfig cfg = with_mode(mode);
        const MaskResult r = optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, cfg);
        const auto pairs = make_pairs(p.feat_a.dim(0), p.feat_b.dim(0), 0, 1, cfg.seed, Pairing::random);
        const FlipAccuracy acc = flip_accuracy(p.h, p.feat_a, 0, p.feat_b, 1, r.mask, pairs);
        EXPECT_EQ(acc.forward, r.flip_acc_forward);
        EXPECT_EQ(acc.backward, r.flip_acc_backward);
        EXPECT_TRUE(r.feasible);
        EXPECT_TRUE(mask_feasible(mode, acc.forward, acc.backward)) << diff_mode_name(mode);
      }
    }
  }
}

TEST(OptimizeMask, LabelSwapGivesBitIdenticalMask) {
  for (DiffMode mode : {DiffMode::symmetric, DiffMode::one_sided_v_to_t}) {
    const SyntheticPair p = suppression_model(4);
    const DiffConfig cfg = with_mode(mode);
    const MaskResult ab = optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, cfg);
    DiffConfig swapped = cfg;
    if (mode == DiffMode::one_sided_v_to_t) swapped.mode = DiffMode::one_sided_t_to_v;
    const MaskResult ba = optimize_mask_features(p.h, p.feat_b, 1, p.feat_a, 0, swapped);
    EXPECT_EQ(ab.mask, ba.mask);
    EXPECT_EQ(ab.flip_acc_forward, ba.flip_acc_backward);
    EXPECT_EQ(ab.flip_acc_backward, ba.flip_acc_forward);
  }
}

TEST(OptimizeMask, ClampAndSumBounds) {
  const SyntheticPair p = channel_model(6);
  const MaskResult r = optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, DiffConfig{});
  for (float v : r.mask.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  for (const TracePoint& t : r.trace) EXPECT_LE(t.mask_sum, 8.0);
  EXPECT_EQ(r.trace.size(), DiffConfig{}.epochs + 1);
  EXPECT_LE(r.mask_sum, 8.0);
}

TEST(OptimizeMask, OneSidedNeverNeedsMoreThanSymmetric) {
  const SyntheticPair p = channel_model(7);
  const MaskResult sym = optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, with_mode(DiffMode::symmetric));
  const MaskResult v2t =
      optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, with_mode(DiffMode::one_sided_v_to_t));
  EXPECT_TRUE(v2t.feasible);
  EXPECT_LE(v2t.mask_sum, sym.mask_sum + 1e-6);
  EXPECT_TRUE(mask_feasible(DiffMode::one_sided_v_to_t, sym.flip_acc_forward, sym.flip_acc_backward));
  EXPECT_TRUE(mask_feasible(DiffMode::one_sided_t_to_v, sym.flip_acc_forward, sym.flip_acc_backward));
}

TEST(OptimizeMask, OneSidedDirectionsDisagreeOnSuppressedChannel) {
  const SyntheticPair p = suppression_model(2);
  const std::size_t j = p.key[0], k = p.key[1];
  const std::uint32_t both = (1u << j) | (1u << k);
  const BinaryOracle t2v = exhaustive_oracle(p, with_mode(DiffMode::one_sided_t_to_v));
  const BinaryOracle v2t = exhaustive_oracle(p, with_mode(DiffMode::one_sided_v_to_t));
  EXPECT_EQ(t2v.minimal, std::vector<std::uint32_t>{both});
  EXPECT_EQ(v2t.min_size, 1u);

  const MaskResult r_t2v =
      optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, with_mode(DiffMode::one_sided_t_to_v));
  const MaskResult r_v2t =
      optimize_mask_features(p.h, p.feat_a, 0, p.feat_b, 1, with_mode(DiffMode::one_sided_v_to_t));
  EXPECT_TRUE(r_t2v.feasible);
  EXPECT_TRUE(r_v2t.feasible);
  EXPECT_GT(r_t2v.mask[k], 0.5f);
  EXPECT_LT(r_v2t.mask[k], 0.5f);
  EXPECT_LT(r_v2t.mask_sum, r_t2v.mask_sum);
}

TEST(DiffConfig, RejectsBadWeights) {
  DiffConfig cfg;
  cfg.w_small = 60.0;
  EXPECT_THROW(validate_diff_config(cfg), Error);
  EXPECT_THROW(parse_diff_mode("sideways"), Error);
  EXPECT_EQ(parse_diff_mode("one_sided_t_to_v"), DiffMode::one_sided_t_to_v);
}
