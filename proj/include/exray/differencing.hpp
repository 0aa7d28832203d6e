#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "exray/engine.hpp"
#include "exray/model_io.hpp"
#include "exray/tensor.hpp"

namespace exray {

/// Length-n vector with entries in [0,1]; the complement is 1 - mask[i].
using FeatureMask = Tensor;

enum class DiffMode { symmetric, one_sided_v_to_t, one_sided_t_to_v };

std::string_view diff_mode_name(DiffMode mode) noexcept;
DiffMode parse_diff_mode(std::string_view text);

/// How the two sample sets are matched up. `identity` pairs sample j with
/// sample j and needs equal set sizes (stamped copies of the same images).
enum class Pairing { random, identity };

/// Flip accuracy a mask must reach in each constrained direction.
inline constexpr double kFeasibleAccuracy = 0.8;

struct DiffConfig {
  double alpha = 0.8;
  double w_large = 50.0;
  double w_small = 1.0;
  std::size_t epochs = 400;
  double lr = 0.05;
  std::uint64_t seed = 0;
  DiffMode mode = DiffMode::symmetric;
};

void validate_diff_config(const DiffConfig& cfg);

struct TracePoint {
  double loss = 0.0;
  double mask_sum = 0.0;
};

struct MaskResult {
  FeatureMask mask;
  bool feasible = false;
  bool fallback = false;  // true when the all-ones initial mask was returned
  double flip_acc_forward = 0.0;   // h(blend(f_a, f_b, M)) == A
  double flip_acc_backward = 0.0;  // h(blend(f_b, f_a, M)) == B
  double mask_sum = 0.0;
  std::vector<TracePoint> trace;
};

/// Channel i of the result is mask[i] * a[i] + (1 - mask[i]) * b[i].
/// Single sample: channels are dim 0. Use blend_batch for N x n x ... inputs.
Tensor blend(const Tensor& feat_a, const Tensor& feat_b, const FeatureMask& mask);
Tensor blend_batch(const Tensor& feat_a, const Tensor& feat_b, const FeatureMask& mask);

struct PairLoss {
  double loss = 0.0;
  double ce1 = 0.0;  // summed over pairs
  double ce2 = 0.0;
  double flip_acc_forward = 0.0;
  double flip_acc_backward = 0.0;
};

/// Summed pair loss over a batch of feature pairs (rows of feat_v and feat_t).
/// Each pair contributes sum(M)/n + w1*ce1 + w2*ce2, where w switches to
/// w_large while its cross-entropy exceeds alpha. One-sided modes drop a term.
/// Writes dL/dmask into `mask_grad` when non-null.
PairLoss pair_loss(std::span<const LayerSpec> h, const Tensor& feat_v, const Tensor& feat_t,
                   const FeatureMask& mask, std::size_t label_v, std::size_t label_t, const DiffConfig& cfg,
                   FeatureMask* mask_grad = nullptr);

/// Whether flip accuracies satisfy the constraints of `mode`.
bool mask_feasible(DiffMode mode, double forward, double backward, double threshold = kFeasibleAccuracy);

/// Index pairs (a_j, b_j). Random pairing is seeded from the sorted labels,
/// so both argument orders produce the same matched pairs.
std::vector<std::pair<std::size_t, std::size_t>> make_pairs(std::size_t count_a, std::size_t count_b,
                                                            std::size_t label_a, std::size_t label_b,
                                                            std::uint64_t seed, Pairing pairing);

/// Minimal mask between two feature batches (N x feature_shape) under head h.
MaskResult optimize_mask_features(std::span<const LayerSpec> h, const Tensor& feat_a, std::size_t label_a,
                                  const Tensor& feat_b, std::size_t label_b, const DiffConfig& cfg,
                                  Pairing pairing = Pairing::random);

/// Minimal mask between two image sets at the split boundary.
MaskResult optimize_mask(const SplitModel& split, std::span<const Tensor> x_a, std::size_t label_a,
                         std::span<const Tensor> x_b, std::size_t label_b, const DiffConfig& cfg,
                         Pairing pairing = Pairing::random);

/// Flip accuracies of a fixed mask over the given pairing, recomputed from scratch.
struct FlipAccuracy {
  double forward = 0.0;
  double backward = 0.0;
};
FlipAccuracy flip_accuracy(std::span<const LayerSpec> h, const Tensor& feat_a, std::size_t label_a,
                           const Tensor& feat_b, std::size_t label_b, const FeatureMask& mask,
                           std::span<const std::pair<std::size_t, std::size_t>> pairs);

}  // namespace exray
