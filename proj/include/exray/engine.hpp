#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "exray/tensor.hpp"

namespace exray {

enum class LayerKind { conv2d, dense, relu, maxpool2d, avgpool2d, flatten };

std::string_view layer_kind_name(LayerKind kind) noexcept;
std::optional<LayerKind> parse_layer_kind(std::string_view name) noexcept;

/// One layer of a feed-forward model. `in_channels`/`out_channels` are
/// feature counts for dense layers. Pooling uses `kernel` and `stride`.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weight;  // conv2d: out x in x k x k, dense: out x in
  Tensor bias;    // out

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec relu();
  static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride);
  static LayerSpec avgpool2d(std::size_t kernel, std::size_t stride);
  static LayerSpec flatten();

  [[nodiscard]] bool has_parameters() const noexcept {
    return kind == LayerKind::conv2d || kind == LayerKind::dense;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-sample output shape of `layer` given its per-sample input shape.
/// Throws shape_mismatch naming `index` when the layer cannot accept the input.
Shape infer_layer_shape(const LayerSpec& layer, const Shape& input, std::size_t index);

/// Dry-run shape inference over the full list; returns the per-sample output shape.
Shape infer_output_shape(std::span<const LayerSpec> layers, const Shape& input);

/// Activations recorded during a forward pass: `inputs[i]` is the input to
/// layer i, `inputs.back()` the network output.
struct Tape {
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::uint32_t>> argmax;
};

/// Runs a batch (leading axis = samples) through `layers`. Returns raw logits.
Tensor forward(std::span<const LayerSpec> layers, const Tensor& batch, Tape* tape = nullptr);

struct ParamGrads {
  Tensor weight;
  Tensor bias;
};

/// Which gradients a backward pass should produce.
struct GradSelector {
  bool input = false;
  std::vector<std::size_t> layers;  // indices of conv2d/dense layers
};

struct Backprop {
  Tensor input_grad;                // empty unless requested
  std::vector<ParamGrads> params;   // one slot per layer; empty unless selected
};

/// Reverse-mode pass over a recorded tape given dL/d(output).
Backprop backward(std::span<const LayerSpec> layers, const Tape& tape, const Tensor& output_grad,
                  const GradSelector& select);

/// Loss over a logits batch; writes dL/dlogits into `logits_grad` (pre-sized).
using LossFn = std::function<double(const Tensor& logits, Tensor& logits_grad)>;

struct LossAndGrad {
  double loss = 0.0;
  Tensor input_grad;
  std::vector<ParamGrads> params;
};

LossAndGrad loss_and_grad(std::span<const LayerSpec> layers, const Tensor& batch,
                          const LossFn& loss, const GradSelector& select);

/// Selector covering every parameterised layer.
GradSelector all_parameters(std::span<const LayerSpec> layers);

/// Row-wise argmax of an N x K logits batch (first index wins ties).
std::vector<std::size_t> predict(const Tensor& logits);

}  // namespace exray
