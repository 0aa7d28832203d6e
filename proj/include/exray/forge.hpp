#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "exray/model_io.hpp"
#include "exray/trigger.hpp"

namespace exray {

struct PoisonConfig {
  TriggerKind kind = TriggerKind::patch;
  std::size_t victim = 0;
  std::size_t target = 1;
  std::size_t row = 12;  // top-left corner of the 3x3 patch
  std::size_t col = 12;
  std::vector<float> pattern;  // 3 x 3 x 3 (C x H x W); empty selects the default
  ColorTransform filter{{0.6f, 0.2f, 0.2f, 0.2f, 0.6f, 0.2f, 0.2f, 0.2f, 0.6f}, {0, 0, 0}};  // 60% desaturation
  double rate = 0.1;
};

struct TrainConfig {
  std::size_t max_epochs = 40;
  std::size_t min_epochs = 6;
  double lr = 0.005;
  std::size_t batch_size = 32;
  // Chance that a training image gets a random 3x3 colour patch pasted at a
  // random spot (label kept) each time it is drawn.
  double occlusion = 0.5;
  // Per-channel gain 1 +- color_jitter and offset +- color_jitter on every draw.
  double color_jitter = 0.2;
};

struct ForgeConfig {
  std::string id = "fixture";  // becomes the model id
  std::uint64_t seed = 0;
  std::size_t classes = 5;
  std::size_t train_per_class = 200;
  std::size_t eval_per_class = 20;
  double jitter = 1.0;  // geometric jitter amplitude in pixels
  std::optional<std::pair<std::size_t, std::size_t>> similar_pair;
  std::optional<PoisonConfig> poison;
  double adaptive_weight = 0.0;
  SplitSelector adaptive_layer = SplitPreset::second_last_conv;
  TrainConfig train;
  double min_accuracy = 0.9;
  double min_asr = 0.9;
};

void validate_forge_config(const ForgeConfig& cfg);

/// Named configurations: clean, similar, patch-trojan, filter-trojan, adaptive.
ForgeConfig forge_preset(std::string_view name, std::uint64_t seed);
std::vector<std::string_view> forge_preset_names();

struct Dataset {
  SampleSet train;
  SampleSet eval;
  std::vector<std::size_t> poisoned;  // indices into train
};

/// 3 x 16 x 16 images of filled polygons with a central glyph; class k has its
/// own vertex count, fill colour and glyph. A similar pair shares the first two.
Dataset gen_dataset(const ForgeConfig& cfg);

/// The trigger the poison config stamps, as a candidate for apply_trigger.
TriggerCandidate poison_trigger(const PoisonConfig& poison, const Shape& image_shape);

/// Stamps and relabels round(rate * |victim|) seeded victim training images.
Dataset poison(Dataset data, const PoisonConfig& poison, std::uint64_t seed);

struct FixtureMetrics {
  double accuracy = 0.0;
  std::optional<double> asr;
  std::size_t epochs = 0;
  // Squared gap of per-channel feature mean and std, stamped victim vs clean target.
  std::optional<double> feature_gap;
};

struct FixtureModel {
  ModelGraph model;
  ForgeConfig config;
  FixtureMetrics metrics;
};

double accuracy(const ModelGraph& model, const SampleSet& samples);

/// Adam training under cross-entropy (plus the adaptive feature-statistics
/// term when cfg.adaptive_weight > 0). Throws forge_failure below the floors.
FixtureModel train_model(const Dataset& data, const ForgeConfig& cfg);

/// Feature-statistics gap at `layer` between stamped victim and clean target images.
double feature_gap(const ModelGraph& model, const SplitSelector& layer, std::span<const Tensor> stamped_victims,
                   std::span<const Tensor> targets);

/// gen_dataset, poison (if configured) and train_model.
struct Fixture {
  Dataset data;
  FixtureModel model;
};
Fixture forge(const ForgeConfig& cfg);

/// Writes model/, train/, eval/ and provenance.json under `dir`.
void write_fixture(const Fixture& fixture, const std::filesystem::path& dir);

struct UnlearnConfig {
  double budget = 3.0;  // accuracy points
  std::size_t max_rounds = 20;
  double lr = 0.002;
  double stop_asr = 0.2;
  std::size_t max_backoffs = 4;  // lr halvings after over-budget rounds
};

struct UnlearnResult {
  ModelGraph model;
  double accuracy_before = 0.0, accuracy_after = 0.0;
  double asr_before = 0.0, asr_after = 0.0;
  std::size_t rounds = 0;
  std::optional<double> size_before, size_after;  // re-reversed trigger size (patch only)
};

/// Fine-tunes on victim images stamped with `trigger` but keeping their true
/// label, mixed 1:1 with clean data, until ASR < stop_asr or the next round
/// would exceed the accuracy budget.
UnlearnResult unlearn(const ModelGraph& model, const TriggerCandidate& trigger, const Dataset& data,
                      const UnlearnConfig& cfg, const ScanConfig& scan, std::uint64_t seed);

}  // namespace exray
