#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exray/differencing.hpp"
#include "exray/model_io.hpp"
#include "exray/trigger.hpp"

namespace exray {

enum class DecisionRule { either, eq5_only, eq6_only };
enum class TriggerLabel { natural, injected };
enum class ModelLabel { clean, trojaned };

std::string_view decision_rule_name(DecisionRule rule) noexcept;
DecisionRule parse_decision_rule(std::string_view text);
std::string_view trigger_label_name(TriggerLabel label) noexcept;
std::string_view model_label_name(ModelLabel label) noexcept;

struct VerdictConfig {
  double beta = 0.8;
  double gamma = 0.8;
  DecisionRule rule = DecisionRule::either;
  // Natural iff the normalised L2 distance is at most this (baseline mode only).
  double l2_threshold = 0.5;
};

void validate_verdict_config(const VerdictConfig& cfg);

struct Similarity {
  bool pass = false;
  double intersection_sum = 0.0;
  double min_mask_sum = 0.0;
};

/// sum(min(m1, m2)) > beta * min(sum m1, sum m2).
Similarity mask_similarity(const FeatureMask& m1, const FeatureMask& m2, double beta);

struct CrossValidation {
  bool pass = false;
  // M2 on V->T, M2 on T->V, M1 on V->V+t, M1 on V+t->V.
  std::array<double, 4> accuracy{};
};

/// Features are batches at the split boundary. V<->T uses a fresh seeded
/// pairing; V<->V+t pairs each image with its own stamped copy.
CrossValidation cross_validate_features(std::span<const LayerSpec> h, const FeatureMask& m1, const FeatureMask& m2,
                                        const Tensor& feat_v, const Tensor& feat_t, const Tensor& feat_v_stamped,
                                        std::size_t victim, std::size_t target, double gamma, std::uint64_t seed);

CrossValidation cross_validate(const SplitModel& split, const FeatureMask& m1, const FeatureMask& m2,
                               std::span<const Tensor> x_v, std::span<const Tensor> x_t,
                               std::span<const Tensor> x_v_stamped, std::size_t victim, std::size_t target,
                               double gamma, std::uint64_t seed);

/// Distance between the per-channel mean activations of the two sets, each
/// scaled to unit maximum.
double l2_baseline_features(const Tensor& feat_v_stamped, const Tensor& feat_t);
double l2_baseline(const SplitModel& split, std::span<const Tensor> x_v_stamped, std::span<const Tensor> x_t);

struct TriggerVerdict {
  TriggerCandidate candidate;
  MaskResult m1;  // V vs T
  MaskResult m2;  // V vs V+t
  double intersection_sum = 0.0;
  double min_mask_sum = 0.0;
  bool eq5_pass = false;
  bool eq6_pass = false;
  std::array<double, 4> cross_accuracy{};
  TriggerLabel label = TriggerLabel::injected;
  double l2 = 0.0;
  std::string diagnostic;  // set when the masks could not be trusted
};

/// Label from the two checks under `rule`.
TriggerLabel decide(bool eq5_pass, bool eq6_pass, DecisionRule rule);

/// Both masks, both checks and the label for one candidate. `samples` must be
/// filtered to correctly classified images. `m1` may carry a V-vs-T mask
/// already optimised under the same `diff` config.
TriggerVerdict judge_trigger(const SplitModel& split, const TriggerCandidate& candidate, const SampleSet& samples,
                             const DiffConfig& diff, const VerdictConfig& verdict, double asr_threshold = 0.9,
                             const MaskResult* m1 = nullptr);

/// Trojaned iff any verdict is Injected.
ModelLabel judge_model(std::span<const TriggerVerdict> verdicts);

}  // namespace exray
