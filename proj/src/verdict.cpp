#include "exray/verdict.hpp"

#include <algorithm>
#include <cmath>

#include "exray/error.hpp"
#include "exray/rng.hpp"

namespace exray {

namespace {

std::vector<double> channel_means(const Tensor& feat) {
  if (feat.rank() < 2 || feat.dim(0) == 0) throw Error(ErrorCode::precondition, "empty feature set");
  const std::size_t n = feat.dim(1), block = feat.size() / (feat.dim(0) * n);
  std::vector<double> means(n, 0.0);
  for (std::size_t j = 0; j < feat.dim(0); ++j) {
    for (std::size_t c = 0; c < n; ++c) {
      const float* p = feat.data() + (j * n + c) * block;
      for (std::size_t s = 0; s < block; ++s) means[c] += p[s];
    }
  }
  for (double& m : means) m /= static_cast<double>(feat.dim(0) * block);
  const double top = *std::max_element(means.begin(), means.end());
  if (top > 0.0) {
    for (double& m : means) m /= top;
  }
  return means;
}

std::vector<std::pair<std::size_t, std::size_t>> identity_pairs(std::size_t count) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < count; ++j) pairs.emplace_back(j, j);
  return pairs;
}

}  // namespace

std::string_view decision_rule_name(DecisionRule rule) noexcept {
  switch (rule) {
    case DecisionRule::eq5_only: return "eq5_only";
    case DecisionRule::eq6_only: return "eq6_only";
    default: return "or";
  }
}

DecisionRule parse_decision_rule(std::string_view text) {
  if (text == "or") return DecisionRule::either;
  if (text == "eq5_only") return DecisionRule::eq5_only;
  if (text == "eq6_only") return DecisionRule::eq6_only;
  throw Error(ErrorCode::invalid_config, "unknown decision rule '" + std::string(text) + "'");
}

std::string_view trigger_label_name(TriggerLabel label) noexcept {
  return label == TriggerLabel::natural ? "natural" : "injected";
}

std::string_view model_label_name(ModelLabel label) noexcept {
  return label == ModelLabel::clean ? "clean" : "trojaned";
}

void validate_verdict_config(const VerdictConfig& cfg) {
  if (!(cfg.beta > 0.0 && cfg.beta < 1.0)) throw Error(ErrorCode::invalid_config, "beta must lie in (0,1)");
  if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0)) throw Error(ErrorCode::invalid_config, "gamma must lie in (0,1)");
  if (!(cfg.l2_threshold >= 0.0)) throw Error(ErrorCode::invalid_config, "l2_threshold must be non-negative");
}

Similarity mask_similarity(const FeatureMask& m1, const FeatureMask& m2, double beta) {
  if (m1.size() != m2.size()) {
    throw Error(ErrorCode::shape_mismatch, "masks of length " + std::to_string(m1.size()) + " and " +
                                               std::to_string(m2.size()) + " cannot be compared");
  }
  Similarity s;
  double sum1 = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    s.intersection_sum += std::min(m1[i], m2[i]);
    sum1 += m1[i];
    sum2 += m2[i];
  }
  s.min_mask_sum = std::min(sum1, sum2);
  s.pass = s.intersection_sum > beta * s.min_mask_sum;
  return s;
}

CrossValidation cross_validate_features(std::span<const LayerSpec> h, const FeatureMask& m1, const FeatureMask& m2,
                                        const Tensor& feat_v, const Tensor& feat_t, const Tensor& feat_v_stamped,
                                        std::size_t victim, std::size_t target, double gamma, std::uint64_t seed) {
  if (feat_v.dim(0) == 0 || feat_t.dim(0) == 0 || feat_v_stamped.dim(0) == 0) {
    throw Error(ErrorCode::precondition, "cross-validation needs non-empty sample sets");
  }
  const auto vt = make_pairs(feat_v.dim(0), feat_t.dim(0), victim, target, derive_seed(seed, "cross-validation"),
                             Pairing::random);
  const auto vv = identity_pairs(feat_v.dim(0));
  if (feat_v_stamped.dim(0) != feat_v.dim(0)) {
    throw Error(ErrorCode::precondition, "stamped set must pair one-to-one with the victim set");
  }
  const FlipAccuracy a = flip_accuracy(h, feat_v, victim, feat_t, target, m2, vt);
  const FlipAccuracy b = flip_accuracy(h, feat_v, victim, feat_v_stamped, target, m1, vv);
  CrossValidation cv;
  cv.accuracy = {a.forward, a.backward, b.forward, b.backward};
  cv.pass = std::all_of(cv.accuracy.begin(), cv.accuracy.end(), [gamma](double acc) { return acc > gamma; });
  return cv;
}

CrossValidation cross_validate(const SplitModel& split, const FeatureMask& m1, const FeatureMask& m2,
                               std::span<const Tensor> x_v, std::span<const Tensor> x_t,
                               std::span<const Tensor> x_v_stamped, std::size_t victim, std::size_t target,
                               double gamma, std::uint64_t seed) {
  if (x_v.empty() || x_t.empty() || x_v_stamped.empty()) {
    throw Error(ErrorCode::precondition, "cross-validation needs non-empty sample sets");
  }
  return cross_validate_features(split.h, m1, m2, features_of(split, stack(x_v)), features_of(split, stack(x_t)),
                                 features_of(split, stack(x_v_stamped)), victim, target, gamma, seed);
}

double l2_baseline_features(const Tensor& feat_v_stamped, const Tensor& feat_t) {
  const auto a = channel_means(feat_v_stamped), b = channel_means(feat_t);
  if (a.size() != b.size()) throw Error(ErrorCode::shape_mismatch, "feature sets differ in channel count");
  double total = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) total += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(total);
}

double l2_baseline(const SplitModel& split, std::span<const Tensor> x_v_stamped, std::span<const Tensor> x_t) {
  if (x_v_stamped.empty() || x_t.empty()) throw Error(ErrorCode::precondition, "empty sample set");
  return l2_baseline_features(features_of(split, stack(x_v_stamped)), features_of(split, stack(x_t)));
}

TriggerLabel decide(bool eq5_pass, bool eq6_pass, DecisionRule rule) {
  bool natural = false;
  switch (rule) {
    case DecisionRule::either: natural = eq5_pass || eq6_pass; break;
    case DecisionRule::eq5_only: natural = eq5_pass; break;
    case DecisionRule::eq6_only: natural = eq6_pass; break;
  }
  return natural ? TriggerLabel::natural : TriggerLabel::injected;
}

TriggerVerdict judge_trigger(const SplitModel& split, const TriggerCandidate& candidate, const SampleSet& samples,
                             const DiffConfig& diff, const VerdictConfig& verdict, double asr_threshold,
                             const MaskResult* m1) {
  validate_verdict_config(verdict);
  if (candidate.asr < asr_threshold) {
    throw Error(ErrorCode::precondition, "candidate ASR " + std::to_string(candidate.asr) + " is below threshold " +
                                             std::to_string(asr_threshold));
  }
  const std::size_t v = candidate.victim, t = candidate.target;
  const std::vector<Tensor> x_v = samples.of_class(v), x_t = samples.of_class(t);
  if (x_v.size() < 2 || x_t.size() < 2) {
    throw Error(ErrorCode::insufficient_samples, "class " + std::to_string(x_v.size() < 2 ? v : t) +
                                                     " has fewer than 2 samples");
  }
  // Keep the victims the trigger actually flips, so V+t is a correctly
  // classified T set just as X_T is.
  const Tensor all_v = stack(x_v);
  const Tensor feat_all_v = features_of(split, all_v);
  const auto flipped = predict(forward(split.h, features_of(split, apply_trigger(all_v, candidate))));
  std::vector<Tensor> kept;
  for (std::size_t j = 0; j < x_v.size(); ++j) {
    if (flipped[j] == t) kept.push_back(x_v[j]);
  }
  if (kept.size() < 2) {
    throw Error(ErrorCode::insufficient_samples, "trigger flips fewer than 2 victim samples");
  }
  const Tensor batch_v = stack(kept);
  const Tensor feat_v = features_of(split, batch_v);
  const Tensor feat_t = features_of(split, stack(x_t));
  const Tensor feat_vt = features_of(split, apply_trigger(batch_v, candidate));

  TriggerVerdict out;
  out.candidate = candidate;
  out.m1 = m1 != nullptr ? *m1 : optimize_mask_features(split.h, feat_all_v, v, feat_t, t, diff, Pairing::random);
  out.m2 = optimize_mask_features(split.h, feat_v, v, feat_vt, t, diff, Pairing::identity);
  const Similarity sim = mask_similarity(out.m1.mask, out.m2.mask, verdict.beta);
  out.intersection_sum = sim.intersection_sum;
  out.min_mask_sum = sim.min_mask_sum;
  out.eq5_pass = sim.pass;
  const CrossValidation cv = cross_validate_features(split.h, out.m1.mask, out.m2.mask, feat_v, feat_t, feat_vt, v, t,
                                                     verdict.gamma, diff.seed);
  out.eq6_pass = cv.pass;
  out.cross_accuracy = cv.accuracy;
  out.l2 = l2_baseline_features(feat_vt, feat_t);
  out.label = decide(out.eq5_pass, out.eq6_pass, verdict.rule);
  if (!out.m1.feasible || !out.m2.feasible) {
    out.label = TriggerLabel::injected;
    out.diagnostic = "infeasible mask";
  } else if (out.m1.fallback && out.m2.fallback) {
    out.label = TriggerLabel::injected;
    out.diagnostic = "both masks are the all-ones fallback";
  }
  return out;
}

ModelLabel judge_model(std::span<const TriggerVerdict> verdicts) {
  const bool any = std::any_of(verdicts.begin(), verdicts.end(),
                               [](const TriggerVerdict& v) { return v.label == TriggerLabel::injected; });
  return any ? ModelLabel::trojaned : ModelLabel::clean;
}

}  // namespace exray
