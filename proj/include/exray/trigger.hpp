#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "exray/model_io.hpp"
#include "exray/tensor.hpp"

namespace exray {

enum class TriggerKind { patch, filter };

std::string_view trigger_kind_name(TriggerKind kind) noexcept;

/// Per-pixel affine colour map: out[c] = sum_k matrix[c][k] * in[k] + bias[c].
struct ColorTransform {
  std::array<float, 9> matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<float, 3> bias{0, 0, 0};

  friend bool operator==(const ColorTransform&, const ColorTransform&) = default;
};

struct TriggerCandidate {
  TriggerKind kind = TriggerKind::patch;
  std::size_t victim = 0;
  std::size_t target = 0;
  Tensor pixel_mask;  // H x W, patch only
  Tensor pattern;     // C x H x W, patch only
  ColorTransform transform;  // filter only
  double asr = 0.0;
  std::optional<double> size_px;     // sum of pixel_mask
  std::optional<double> ssim_score;  // mean SSIM of stamped vs clean

  static TriggerCandidate patch(std::size_t victim, std::size_t target, Tensor pixel_mask, Tensor pattern);
  static TriggerCandidate filter(std::size_t victim, std::size_t target, ColorTransform transform);
};

struct ScanConfig {
  double max_trigger_px = 48.0;   // patch size bound (pixels, 16x16 inputs)
  double ssim_bound = 0.8;
  double asr_threshold = 0.9;
  std::size_t re_epochs = 500;
  double re_lr = 0.1;
  double lambda_init = 1e-3;
  std::size_t lambda_patience = 5;
  double lambda_factor = 2.0;
  double mask_init = 0.1;
  std::size_t filter_epochs = 300;
  double filter_lr = 0.02;
  double ssim_weight = 20.0;
  // A search stops once no iterate has qualified after give_up_epochs, or the
  // best qualifying iterate has not improved for stall_epochs.
  std::size_t give_up_epochs = 150;
  std::size_t stall_epochs = 100;
  bool scan_patch = true;
  bool scan_filter = true;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

/// Throws invalid_config when a bound or threshold is out of range.
void validate_scan_config(const ScanConfig& cfg);

/// Stamps one image (C x H x W) or a batch (N x C x H x W).
Tensor apply_trigger(const Tensor& x, const TriggerCandidate& trigger);

/// Fraction of stamped victims classified as the trigger's target.
double attack_success_rate(const ModelGraph& model, const TriggerCandidate& trigger, std::span<const Tensor> victims);

/// Mean SSIM between victims and their stamped versions.
double mean_ssim(const TriggerCandidate& trigger, std::span<const Tensor> victims);

std::optional<TriggerCandidate> reverse_patch(const ModelGraph& model, std::span<const Tensor> victims,
                                              std::size_t victim, std::size_t target, const ScanConfig& cfg);

std::optional<TriggerCandidate> reverse_filter(const ModelGraph& model, std::span<const Tensor> victims,
                                               std::size_t victim, std::size_t target, const ScanConfig& cfg);

/// Both searches for every ordered class pair, sorted by (victim, target, kind).
/// `samples` should already be filtered to correctly classified images.
std::vector<TriggerCandidate> enumerate_candidates(const ModelGraph& model, const SampleSet& samples,
                                                   const ScanConfig& cfg);

}  // namespace exray
