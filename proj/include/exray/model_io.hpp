#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "exray/engine.hpp"
#include "exray/tensor.hpp"

namespace exray {

inline constexpr std::string_view kModelFormat = "exray-model/1";
inline constexpr std::string_view kDatasetFormat = "exray-dataset/1";
inline constexpr std::string_view kModelManifest = "model.json";
inline constexpr std::string_view kModelBlob = "weights.bin";
inline constexpr std::string_view kDatasetManifest = "dataset.json";
inline constexpr std::string_view kDatasetBlob = "images.bin";

struct ModelGraph {
  std::string id;
  std::vector<LayerSpec> layers;
  Shape input_shape;  // C x H x W
  std::size_t class_count = 0;

  /// Layer boundaries b (g = layers[0,b), h = layers[b,end)) that sit right
  /// after an activation or pooling layer.
  [[nodiscard]] std::vector<std::size_t> split_candidates() const;
};

/// Dry-run shape inference plus the class-count check. Throws shape_inference.
void validate_model(const ModelGraph& model);

void save_model(const ModelGraph& model, const std::filesystem::path& bundle);
ModelGraph load_model(const std::filesystem::path& bundle);

/// Logits for a batch of images.
Tensor model_logits(const ModelGraph& model, const Tensor& batch);

struct SampleSet {
  Shape image_shape;
  std::vector<std::string> class_names;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  [[nodiscard]] std::size_t class_count() const noexcept { return class_names.size(); }
  [[nodiscard]] std::vector<std::size_t> counts() const;
  [[nodiscard]] std::vector<Tensor> of_class(std::size_t label) const;
};

/// Pixel range, shape and label checks. Throws validation.
void validate_samples(const SampleSet& samples);

void save_samples(const SampleSet& samples, const std::filesystem::path& bundle);
SampleSet load_samples(const std::filesystem::path& bundle);

/// Keeps only correctly classified samples; every class must keep >= 2.
SampleSet filter_correct(const ModelGraph& model, const SampleSet& samples);

enum class SplitPreset { middle, last_conv, second_last_conv };
using SplitSelector = std::variant<SplitPreset, std::size_t>;

/// "middle", "last-conv", "second-last-conv" or a numeric boundary.
SplitSelector parse_split_selector(std::string_view text);
std::string split_selector_name(const SplitSelector& selector);

struct SplitModel {
  std::vector<LayerSpec> g;
  std::vector<LayerSpec> h;
  std::size_t boundary = 0;
  std::size_t n = 0;           // channels at the boundary
  Shape feature_shape;         // per-sample shape of g's output
  std::string warning;         // non-empty when a preset had to fall back
};

SplitModel split_model(const ModelGraph& model, const SplitSelector& selector = SplitPreset::second_last_conv);

/// g applied to a batch of images.
Tensor features_of(const SplitModel& split, const Tensor& images);
/// h applied to a batch of features.
Tensor head_logits(const SplitModel& split, const Tensor& features);

/// CRC-32 (IEEE) of a byte range.
std::uint32_t crc32_of(std::span<const unsigned char> bytes);

}  // namespace exray
