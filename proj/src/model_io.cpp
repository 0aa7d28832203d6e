#include "exray/model_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "exray/error.hpp"

namespace exray {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "short write to " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

json read_manifest(const fs::path& path, std::string_view format) {
  if (!fs::exists(path)) throw Error(ErrorCode::io, "missing manifest " + path.string());
  const auto bytes = read_bytes(path);
  json manifest = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw Error(ErrorCode::bad_magic, path.string() + " is not a JSON manifest");
  }
  if (manifest.value("format", std::string{}) != format) {
    throw Error(ErrorCode::bad_magic, path.string() + " does not declare format " + std::string(format));
  }
  return manifest;
}

void append_floats(std::vector<unsigned char>& blob, std::span<const float> values) {
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) blob.push_back(static_cast<unsigned char>(bits >> (8 * b)));
  }
}

std::vector<float> decode_floats(std::span<const unsigned char> bytes) {
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

json tensor_entry(const Tensor& t, std::vector<unsigned char>& blob) {
  const std::size_t offset = blob.size();
  append_floats(blob, t.values());
  const std::size_t bytes = blob.size() - offset;
  return {{"shape", t.shape()},
          {"offset", offset},
          {"bytes", bytes},
          {"crc32", crc32_of(std::span(blob).subspan(offset, bytes))}};
}

Tensor read_tensor(const json& entry, std::span<const unsigned char> blob, const std::string& what) {
  const Shape shape = entry.at("shape").get<Shape>();
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto bytes = entry.at("bytes").get<std::size_t>();
  if (bytes != shape_product(shape) * 4) {
    throw Error(ErrorCode::shape_inference, what + ": byte length disagrees with shape " + shape_string(shape));
  }
  if (offset + bytes > blob.size()) {
    throw Error(ErrorCode::checksum_mismatch, what + ": weight blob truncated");
  }
  const auto slice = blob.subspan(offset, bytes);
  if (crc32_of(slice) != entry.at("crc32").get<std::uint32_t>()) {
    throw Error(ErrorCode::checksum_mismatch, what + ": CRC32 mismatch");
  }
  return Tensor(shape, decode_floats(slice));
}

std::size_t conv_block_end(const std::vector<LayerSpec>& layers, std::size_t conv_index) {
  std::size_t end = conv_index + 1;
  while (end < layers.size() && (layers[end].kind == LayerKind::relu || layers[end].kind == LayerKind::maxpool2d ||
                                 layers[end].kind == LayerKind::avgpool2d)) {
    ++end;
  }
  return end;
}

}  // namespace

std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::size_t> ModelGraph::split_candidates() const {
  std::vector<std::size_t> out;
  for (std::size_t b = 1; b < layers.size(); ++b) {
    const LayerKind kind = layers[b - 1].kind;
    if (kind == LayerKind::relu || kind == LayerKind::maxpool2d || kind == LayerKind::avgpool2d) out.push_back(b);
  }
  return out;
}

void validate_model(const ModelGraph& model) {
  if (model.input_shape.size() != 3) {
    throw Error(ErrorCode::shape_inference, "input_shape must be C x H x W");
  }
  Shape out;
  try {
    out = infer_output_shape(model.layers, model.input_shape);
  } catch (const Error& e) {
    throw Error(ErrorCode::shape_inference, e.what());
  }
  if (out != Shape{model.class_count}) {
    throw Error(ErrorCode::shape_inference, "model output " + shape_string(out) + " disagrees with class_count " +
                                                std::to_string(model.class_count));
  }
}

void save_model(const ModelGraph& model, const fs::path& bundle) {
  validate_model(model);
  fs::create_directories(bundle);
  std::vector<unsigned char> blob;
  json layers = json::array();
  for (const LayerSpec& layer : model.layers) {
    json entry = {{"kind", layer_kind_name(layer.kind)}};
    switch (layer.kind) {
      case LayerKind::conv2d:
        entry["padding"] = layer.padding;
        entry["kernel"] = layer.kernel;
        entry["stride"] = layer.stride;
        [[fallthrough]];
      case LayerKind::dense:
        entry["in_channels"] = layer.in_channels;
        entry["out_channels"] = layer.out_channels;
        entry["tensors"] = {{"weight", tensor_entry(layer.weight, blob)}, {"bias", tensor_entry(layer.bias, blob)}};
        break;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d:
        entry["kernel"] = layer.kernel;
        entry["stride"] = layer.stride;
        break;
      case LayerKind::relu:
      case LayerKind::flatten: break;
    }
    layers.push_back(std::move(entry));
  }
  const json manifest = {{"format", kModelFormat},       {"id", model.id},
                         {"input_shape", model.input_shape}, {"class_count", model.class_count},
                         {"weights", kModelBlob},        {"layers", layers}};
  write_bytes(bundle / kModelBlob, blob);
  write_text(bundle / kModelManifest, manifest.dump(2) + "\n");
}

ModelGraph load_model(const fs::path& bundle) {
  const json manifest = read_manifest(bundle / kModelManifest, kModelFormat);
  const fs::path blob_path = bundle / manifest.value("weights", std::string(kModelBlob));
  if (!fs::exists(blob_path)) throw Error(ErrorCode::io, "missing weight blob " + blob_path.string());
  const auto blob = read_bytes(blob_path);
  ModelGraph model;
  try {
    model.id = manifest.value("id", bundle.filename().string());
    model.input_shape = manifest.at("input_shape").get<Shape>();
    model.class_count = manifest.at("class_count").get<std::size_t>();
    std::size_t index = 0;
    for (const json& entry : manifest.at("layers")) {
      const auto kind = parse_layer_kind(entry.at("kind").get<std::string>());
      if (!kind) throw Error(ErrorCode::shape_inference, "layer " + std::to_string(index) + ": unknown kind");
      LayerSpec layer;
      layer.kind = *kind;
      layer.in_channels = entry.value("in_channels", std::size_t{0});
      layer.out_channels = entry.value("out_channels", std::size_t{0});
      layer.kernel = entry.value("kernel", std::size_t{0});
      layer.stride = entry.value("stride", std::size_t{1});
      layer.padding = entry.value("padding", std::size_t{0});
      if (layer.has_parameters()) {
        const std::string what = "layer " + std::to_string(index);
        layer.weight = read_tensor(entry.at("tensors").at("weight"), blob, what + " weight");
        layer.bias = read_tensor(entry.at("tensors").at("bias"), blob, what + " bias");
      }
      model.layers.push_back(std::move(layer));
      ++index;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::shape_inference, std::string("malformed model manifest: ") + e.what());
  }
  validate_model(model);
  return model;
}

Tensor model_logits(const ModelGraph& model, const Tensor& batch) { return forward(model.layers, batch); }

std::vector<std::size_t> SampleSet::counts() const {
  std::vector<std::size_t> out(class_count(), 0);
  for (std::size_t label : labels) {
    if (label < out.size()) ++out[label];
  }
  return out;
}

std::vector<Tensor> SampleSet::of_class(std::size_t label) const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] == label) out.push_back(images[i]);
  }
  return out;
}

void validate_samples(const SampleSet& samples) {
  if (samples.images.size() != samples.labels.size()) {
    throw Error(ErrorCode::validation, "image and label counts differ");
  }
  for (std::size_t i = 0; i < samples.images.size(); ++i) {
    if (samples.images[i].shape() != samples.image_shape) {
      throw Error(ErrorCode::validation, "image " + std::to_string(i) + " has shape " +
                                             shape_string(samples.images[i].shape()));
    }
    if (samples.labels[i] >= samples.class_count()) {
      throw Error(ErrorCode::validation, "image " + std::to_string(i) + " has out-of-range label");
    }
    for (float v : samples.images[i].values()) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw Error(ErrorCode::validation, "image " + std::to_string(i) + " has pixel value " +
                                               std::to_string(v) + " outside [0,1]");
      }
    }
  }
}

void save_samples(const SampleSet& samples, const fs::path& bundle) {
  validate_samples(samples);
  fs::create_directories(bundle);
  std::vector<unsigned char> blob;
  std::vector<std::size_t> offsets;
  for (const Tensor& image : samples.images) {
    offsets.push_back(blob.size());
    append_floats(blob, image.values());
  }
  const json manifest = {{"format", kDatasetFormat},
                         {"image_shape", samples.image_shape},
                         {"class_names", samples.class_names},
                         {"counts", samples.counts()},
                         {"images", kDatasetBlob},
                         {"labels", samples.labels},
                         {"offsets", offsets},
                         {"crc32", crc32_of(blob)}};
  write_bytes(bundle / kDatasetBlob, blob);
  write_text(bundle / kDatasetManifest, manifest.dump(2) + "\n");
}

SampleSet load_samples(const fs::path& bundle) {
  const json manifest = read_manifest(bundle / kDatasetManifest, kDatasetFormat);
  const fs::path blob_path = bundle / manifest.value("images", std::string(kDatasetBlob));
  if (!fs::exists(blob_path)) throw Error(ErrorCode::io, "missing image blob " + blob_path.string());
  const auto blob = read_bytes(blob_path);
  SampleSet samples;
  std::vector<std::size_t> offsets, counts;
  try {
    samples.image_shape = manifest.at("image_shape").get<Shape>();
    samples.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    samples.labels = manifest.at("labels").get<std::vector<std::size_t>>();
    offsets = manifest.at("offsets").get<std::vector<std::size_t>>();
    counts = manifest.at("counts").get<std::vector<std::size_t>>();
    if (crc32_of(blob) != manifest.at("crc32").get<std::uint32_t>()) {
      throw Error(ErrorCode::checksum_mismatch, "image blob CRC32 mismatch");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed dataset manifest: ") + e.what());
  }
  if (offsets.size() != samples.labels.size()) throw Error(ErrorCode::validation, "offsets/labels length mismatch");
  const std::size_t image_bytes = shape_product(samples.image_shape) * 4;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (offsets[i] + image_bytes > blob.size()) throw Error(ErrorCode::checksum_mismatch, "image blob truncated");
    samples.images.emplace_back(samples.image_shape, decode_floats(std::span(blob).subspan(offsets[i], image_bytes)));
  }
  validate_samples(samples);
  if (counts != samples.counts()) throw Error(ErrorCode::validation, "per-class counts disagree with labels");
  return samples;
}

SampleSet filter_correct(const ModelGraph& model, const SampleSet& samples) {
  SampleSet kept;
  kept.image_shape = samples.image_shape;
  kept.class_names = samples.class_names;
  if (!samples.images.empty()) {
    const auto predicted = predict(model_logits(model, stack(samples.images)));
    for (std::size_t i = 0; i < samples.images.size(); ++i) {
      if (predicted[i] == samples.labels[i]) {
        kept.images.push_back(samples.images[i]);
        kept.labels.push_back(samples.labels[i]);
      }
    }
  }
  const auto counts = kept.counts();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] < 2) {
      throw Error(ErrorCode::insufficient_samples,
                  "class " + std::to_string(k) + " (" + samples.class_names[k] + ") keeps " +
                      std::to_string(counts[k]) + " correctly classified samples, need at least 2");
    }
  }
  return kept;
}

SplitSelector parse_split_selector(std::string_view text) {
  if (text == "middle") return SplitPreset::middle;
  if (text == "last-conv") return SplitPreset::last_conv;
  if (text == "second-last-conv") return SplitPreset::second_last_conv;
  std::size_t index = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), index);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::invalid_config, "unknown layer selector '" + std::string(text) + "'");
  }
  return index;
}

std::string split_selector_name(const SplitSelector& selector) {
  if (const auto* index = std::get_if<std::size_t>(&selector)) return std::to_string(*index);
  switch (std::get<SplitPreset>(selector)) {
    case SplitPreset::middle: return "middle";
    case SplitPreset::last_conv: return "last-conv";
    case SplitPreset::second_last_conv: return "second-last-conv";
  }
  return "second-last-conv";
}

SplitModel split_model(const ModelGraph& model, const SplitSelector& selector) {
  const auto candidates = model.split_candidates();
  if (candidates.empty()) throw Error(ErrorCode::precondition, "model has no activation boundary to split at");
  SplitModel split;
  std::size_t boundary = 0;
  if (const auto* index = std::get_if<std::size_t>(&selector)) {
    if (std::find(candidates.begin(), candidates.end(), *index) == candidates.end()) {
      throw Error(ErrorCode::precondition, "boundary " + std::to_string(*index) + " is not an activation boundary");
    }
    boundary = *index;
  } else {
    std::vector<std::size_t> conv_ends;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (model.layers[i].kind == LayerKind::conv2d) {
        const std::size_t end = conv_block_end(model.layers, i);
        if (std::find(candidates.begin(), candidates.end(), end) != candidates.end()) conv_ends.push_back(end);
      }
    }
    switch (std::get<SplitPreset>(selector)) {
      case SplitPreset::middle: {
        const double half = static_cast<double>(model.layers.size()) / 2.0;
        boundary = *std::min_element(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
          return std::abs(static_cast<double>(a) - half) < std::abs(static_cast<double>(b) - half);
        });
        break;
      }
      case SplitPreset::last_conv:
        if (conv_ends.empty()) throw Error(ErrorCode::precondition, "model has no convolution block");
        boundary = conv_ends.back();
        break;
      case SplitPreset::second_last_conv:
        if (conv_ends.empty()) throw Error(ErrorCode::precondition, "model has no convolution block");
        if (conv_ends.size() == 1) {
          split.warning = "model has a single convolution block; second-last-conv falls back to it";
          boundary = conv_ends.back();
        } else {
          boundary = conv_ends[conv_ends.size() - 2];
        }
        break;
    }
  }
  split.boundary = boundary;
  split.g.assign(model.layers.begin(), model.layers.begin() + static_cast<long>(boundary));
  split.h.assign(model.layers.begin() + static_cast<long>(boundary), model.layers.end());
  split.feature_shape = infer_output_shape(split.g, model.input_shape);
  split.n = split.feature_shape.at(0);
  return split;
}

Tensor features_of(const SplitModel& split, const Tensor& images) { return forward(split.g, images); }

Tensor head_logits(const SplitModel& split, const Tensor& features) { return forward(split.h, features); }

}  // namespace exray
