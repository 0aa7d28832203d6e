#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exray/differencing.hpp"
#include "exray/model_io.hpp"
#include "exray/trigger.hpp"
#include "exray/verdict.hpp"

namespace exray {

enum class ScanMode { symmetric, one_sided_v2t, one_sided_t2v, eq5_only, eq6_only, l2_baseline, no_exray };

/// Hyphenated CLI names: "symmetric", "one-sided-v2t", ..., "no-exray".
std::string_view scan_mode_name(ScanMode mode) noexcept;
ScanMode parse_scan_mode(std::string_view text);
std::vector<ScanMode> all_scan_modes();

struct ScanOptions {
  ScanConfig trigger;
  DiffConfig diff;
  VerdictConfig verdict;
  SplitSelector layer = SplitPreset::second_last_conv;
  ScanMode mode = ScanMode::symmetric;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

/// Copies `seed` and `jobs` into the sub-configs and applies the mode's
/// differencing direction and decision rule. Throws invalid_config.
ScanOptions resolve_options(ScanOptions options);

struct ScanTimings {
  double filter_s = 0.0;
  double reverse_s = 0.0;
  double judge_s = 0.0;
  double total_s = 0.0;
};

struct ScanReport {
  std::string model_id;
  ScanOptions options;  // resolved
  std::string config_echo;  // effective config as loaded by the caller, if any
  std::size_t split_boundary = 0;
  std::size_t split_channels = 0;
  Shape feature_shape;
  std::vector<std::string> warnings;
  std::vector<std::size_t> correct_per_class;
  std::vector<TriggerVerdict> verdicts;  // sorted by (victim, target, kind)
  ModelLabel model_label = ModelLabel::clean;
  ScanTimings timings;
};

/// filter_correct, enumerate_candidates, then judge_candidates.
ScanReport scan_model(const ModelGraph& model, const SampleSet& samples, const ScanOptions& options);

/// Judges precomputed candidates under `options.mode`; `correct` must already
/// be filtered to correctly classified images. Lets several modes share one
/// trigger search.
ScanReport judge_candidates(const ModelGraph& model, const SampleSet& correct,
                            std::span<const TriggerCandidate> candidates, const ScanOptions& options);

/// Row-major square grid of width ceil(sqrt(n)); trailing cells are NaN.
std::vector<std::vector<double>> heat_grid(const FeatureMask& mask);

/// JSON text of the report, "exray-report/1". Timings sit under one
/// top-level "timings" key so reruns can be compared without them.
std::string report_json(const ScanReport& report);

}  // namespace exray
