#include "exray/scan.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <map>

#include "exray/error.hpp"
#include "exray/parallel.hpp"
#include "json.hpp"

namespace exray {

namespace {

using nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

constexpr double kDefaultGamma = 0.8;

ordered_json mask_json(const MaskResult& m) {
  if (m.mask.size() == 0) return nullptr;
  ordered_json j;
  j["values"] = m.mask.values();
  j["heat"] = heat_grid(m.mask);
  j["sum"] = m.mask_sum;
  j["feasible"] = m.feasible;
  j["fallback"] = m.fallback;
  j["flip_accuracy"] = {m.flip_acc_forward, m.flip_acc_backward};
  return j;
}

ordered_json candidate_json(const TriggerCandidate& c) {
  ordered_json j;
  j["kind"] = trigger_kind_name(c.kind);
  j["victim"] = c.victim;
  j["target"] = c.target;
  j["asr"] = c.asr;
  j["size_px"] = c.size_px ? ordered_json(*c.size_px) : ordered_json(nullptr);
  j["ssim"] = c.ssim_score ? ordered_json(*c.ssim_score) : ordered_json(nullptr);
  if (c.kind == TriggerKind::patch) {
    const std::size_t h = c.pixel_mask.dim(0), w = c.pixel_mask.dim(1);
    ordered_json rows = ordered_json::array();
    for (std::size_t y = 0; y < h; ++y) {
      std::vector<float> row(c.pixel_mask.data() + y * w, c.pixel_mask.data() + (y + 1) * w);
      rows.push_back(row);
    }
    j["pixel_mask"] = rows;
    j["transform"] = nullptr;
  } else {
    j["pixel_mask"] = nullptr;
    j["transform"] = {{"matrix", c.transform.matrix}, {"bias", c.transform.bias}};
  }
  return j;
}

ordered_json options_json(const ScanOptions& o) {
  ordered_json j;
  j["mode"] = scan_mode_name(o.mode);
  j["layer"] = split_selector_name(o.layer);
  j["seed"] = o.seed;
  const ScanConfig& t = o.trigger;
  j["trigger"] = {{"max_trigger_px", t.max_trigger_px}, {"ssim_bound", t.ssim_bound},
                  {"asr_threshold", t.asr_threshold},   {"re_epochs", t.re_epochs},
                  {"re_lr", t.re_lr},                   {"lambda_init", t.lambda_init},
                  {"lambda_patience", t.lambda_patience}, {"lambda_factor", t.lambda_factor},
                  {"mask_init", t.mask_init},           {"filter_epochs", t.filter_epochs},
                  {"filter_lr", t.filter_lr},           {"ssim_weight", t.ssim_weight},
                  {"give_up_epochs", t.give_up_epochs}, {"stall_epochs", t.stall_epochs},
                  {"scan_patch", t.scan_patch},         {"scan_filter", t.scan_filter}};
  const DiffConfig& d = o.diff;
  j["diff"] = {{"alpha", d.alpha}, {"w_large", d.w_large}, {"w_small", d.w_small}, {"epochs", d.epochs},
               {"lr", d.lr},       {"direction", diff_mode_name(d.mode)}};
  const VerdictConfig& v = o.verdict;
  j["verdict"] = {{"beta", v.beta},
                  {"gamma", v.gamma},
                  {"decision_rule", decision_rule_name(v.rule)},
                  {"l2_threshold", v.l2_threshold}};
  return j;
}

ordered_json verdict_json(const TriggerVerdict& v) {
  ordered_json j;
  j["candidate"] = candidate_json(v.candidate);
  j["m1"] = mask_json(v.m1);
  j["m2"] = mask_json(v.m2);
  const bool masks = v.m1.mask.size() > 0;
  j["intersection_sum"] = masks ? ordered_json(v.intersection_sum) : ordered_json(nullptr);
  j["min_mask_sum"] = masks ? ordered_json(v.min_mask_sum) : ordered_json(nullptr);
  j["eq5_pass"] = masks ? ordered_json(v.eq5_pass) : ordered_json(nullptr);
  j["eq6_pass"] = masks ? ordered_json(v.eq6_pass) : ordered_json(nullptr);
  j["cross_accuracy"] = masks ? ordered_json(v.cross_accuracy) : ordered_json(nullptr);
  j["l2_baseline"] = v.l2;
  j["label"] = trigger_label_name(v.label);
  j["diagnostic"] = v.diagnostic.empty() ? ordered_json(nullptr) : ordered_json(v.diagnostic);
  return j;
}

TriggerVerdict l2_verdict(const SplitModel& split, const TriggerCandidate& c, const SampleSet& correct,
                          const VerdictConfig& cfg) {
  TriggerVerdict v;
  v.candidate = c;
  const auto x_v = correct.of_class(c.victim), x_t = correct.of_class(c.target);
  if (x_v.empty() || x_t.empty()) throw Error(ErrorCode::insufficient_samples, "empty class in l2 baseline");
  v.l2 = l2_baseline_features(features_of(split, apply_trigger(stack(x_v), c)), features_of(split, stack(x_t)));
  v.label = v.l2 <= cfg.l2_threshold ? TriggerLabel::natural : TriggerLabel::injected;
  return v;
}

}  // namespace

std::string_view scan_mode_name(ScanMode mode) noexcept {
  switch (mode) {
    case ScanMode::one_sided_v2t: return "one-sided-v2t";
    case ScanMode::one_sided_t2v: return "one-sided-t2v";
    case ScanMode::eq5_only: return "eq5-only";
    case ScanMode::eq6_only: return "eq6-only";
    case ScanMode::l2_baseline: return "l2-baseline";
    case ScanMode::no_exray: return "no-exray";
    default: return "symmetric";
  }
}

std::vector<ScanMode> all_scan_modes() {
  return {ScanMode::symmetric, ScanMode::one_sided_v2t, ScanMode::one_sided_t2v, ScanMode::eq5_only,
          ScanMode::eq6_only,  ScanMode::l2_baseline,   ScanMode::no_exray};
}

ScanMode parse_scan_mode(std::string_view text) {
  for (ScanMode m : all_scan_modes()) {
    if (scan_mode_name(m) == text) return m;
  }
  throw Error(ErrorCode::invalid_config, "unknown mode '" + std::string(text) + "'");
}

ScanOptions resolve_options(ScanOptions o) {
  if (o.jobs == 0) throw Error(ErrorCode::invalid_config, "jobs must be positive");
  o.trigger.seed = o.seed;
  o.trigger.jobs = o.jobs;
  o.diff.seed = o.seed;
  switch (o.mode) {
    case ScanMode::one_sided_v2t: o.diff.mode = DiffMode::one_sided_v_to_t; break;
    case ScanMode::one_sided_t2v: o.diff.mode = DiffMode::one_sided_t_to_v; break;
    case ScanMode::eq5_only: o.verdict.rule = DecisionRule::eq5_only; break;
    case ScanMode::eq6_only: o.verdict.rule = DecisionRule::eq6_only; break;
    default: break;
  }
  validate_scan_config(o.trigger);
  validate_diff_config(o.diff);
  validate_verdict_config(o.verdict);
  return o;
}

ScanReport judge_candidates(const ModelGraph& model, const SampleSet& correct,
                            std::span<const TriggerCandidate> candidates, const ScanOptions& options) {
  const auto start = Clock::now();
  ScanReport r;
  r.model_id = model.id;
  r.options = resolve_options(options);
  const ScanOptions& o = r.options;
  const SplitModel split = split_model(model, o.layer);
  r.split_boundary = split.boundary;
  r.split_channels = split.n;
  r.feature_shape = split.feature_shape;
  if (!split.warning.empty()) r.warnings.push_back(split.warning);
  if (o.verdict.gamma != kDefaultGamma) {
    r.warnings.push_back("gamma " + std::to_string(o.verdict.gamma) + " differs from the default 0.8");
  }
  r.correct_per_class = correct.counts();

  std::vector<TriggerCandidate> sorted(candidates.begin(), candidates.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const TriggerCandidate& a, const TriggerCandidate& b) {
    return std::tie(a.victim, a.target, a.kind) < std::tie(b.victim, b.target, b.kind);
  });
  r.verdicts.resize(sorted.size());

  if (o.mode == ScanMode::no_exray) {
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      r.verdicts[i].candidate = sorted[i];
      r.verdicts[i].label = TriggerLabel::injected;
    }
  } else if (o.mode == ScanMode::l2_baseline) {
    parallel_for(sorted.size(), o.jobs,
                 [&](std::size_t i) { r.verdicts[i] = l2_verdict(split, sorted[i], correct, o.verdict); });
  } else {
    // One V-vs-T mask per class pair, shared by that pair's candidates.
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (const TriggerCandidate& c : sorted) {
      if (slot.emplace(std::pair{c.victim, c.target}, pairs.size()).second) pairs.emplace_back(c.victim, c.target);
    }
    std::vector<MaskResult> m1(pairs.size());
    parallel_for(pairs.size(), o.jobs, [&](std::size_t i) {
      const auto [v, t] = pairs[i];
      m1[i] = optimize_mask(split, correct.of_class(v), v, correct.of_class(t), t, o.diff, Pairing::random);
    });
    parallel_for(sorted.size(), o.jobs, [&](std::size_t i) {
      const TriggerCandidate& c = sorted[i];
      r.verdicts[i] = judge_trigger(split, c, correct, o.diff, o.verdict, o.trigger.asr_threshold,
                                    &m1[slot.at({c.victim, c.target})]);
      r.verdicts[i].m1.trace.clear();
      r.verdicts[i].m2.trace.clear();
    });
  }
  r.model_label = judge_model(r.verdicts);
  r.timings.judge_s = seconds_since(start);
  r.timings.total_s = r.timings.judge_s;
  return r;
}

ScanReport scan_model(const ModelGraph& model, const SampleSet& samples, const ScanOptions& options) {
  const auto start = Clock::now();
  const ScanOptions o = resolve_options(options);
  const SampleSet correct = filter_correct(model, samples);
  const double filter_s = seconds_since(start);
  const auto search = Clock::now();
  const std::vector<TriggerCandidate> candidates = enumerate_candidates(model, correct, o.trigger);
  const double reverse_s = seconds_since(search);
  ScanReport r = judge_candidates(model, correct, candidates, o);
  r.timings.filter_s = filter_s;
  r.timings.reverse_s = reverse_s;
  r.timings.total_s = seconds_since(start);
  return r;
}

std::vector<std::vector<double>> heat_grid(const FeatureMask& mask) {
  const std::size_t n = mask.size();
  const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<std::vector<double>> grid;
  if (n == 0) return grid;
  for (std::size_t start = 0; start < n; start += width) {
    std::vector<double> row(width, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = start; i < std::min(n, start + width); ++i) row[i - start] = mask[i];
    grid.push_back(std::move(row));
  }
  return grid;
}

std::string report_json(const ScanReport& r) {
  ordered_json j;
  j["format"] = "exray-report/1";
  j["model_id"] = r.model_id;
  j["model_label"] = model_label_name(r.model_label);
  j["config"] = options_json(r.options);
  j["config_echo"] = r.config_echo;
  j["split"] = {{"boundary", r.split_boundary}, {"channels", r.split_channels}, {"feature_shape", r.feature_shape}};
  j["warnings"] = r.warnings;
  j["correct_per_class"] = r.correct_per_class;
  ordered_json verdicts = ordered_json::array();
  for (const TriggerVerdict& v : r.verdicts) verdicts.push_back(verdict_json(v));
  j["candidates"] = verdicts;
  j["timings"] = {{"filter_s", r.timings.filter_s},
                  {"reverse_s", r.timings.reverse_s},
                  {"judge_s", r.timings.judge_s},
                  {"total_s", r.timings.total_s}};
  return j.dump(2) + "\n";
}

}  // namespace exray
