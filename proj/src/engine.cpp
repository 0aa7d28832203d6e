#include "exray/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "exray/error.hpp"

namespace exray {

namespace {

struct Geometry {
  std::size_t batch, channels, height, width, out_height, out_width;
};

Error shape_error(std::size_t index, LayerKind kind, const std::string& detail) {
  return Error(ErrorCode::shape_mismatch, "layer " + std::to_string(index) + " (" +
                                              std::string(layer_kind_name(kind)) + "): " + detail);
}

// Valid output range of ox such that 0 <= ox*stride + offset < width.
std::pair<std::size_t, std::size_t> valid_range(long offset, std::size_t stride, std::size_t width,
                                                std::size_t out_width) {
  const long s = static_cast<long>(stride);
  long lo = 0;
  if (offset < 0) lo = (-offset + s - 1) / s;
  long hi = (static_cast<long>(width) - 1 - offset);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<long>(hi, static_cast<long>(out_width));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

Geometry spatial_geometry(const LayerSpec& layer, const Tensor& input) {
  Geometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), 0, 0};
  if (layer.kind == LayerKind::conv2d) {
    g.out_height = (g.height + 2 * layer.padding - layer.kernel) / layer.stride + 1;
    g.out_width = (g.width + 2 * layer.padding - layer.kernel) / layer.stride + 1;
  } else {
    g.out_height = (g.height - layer.kernel) / layer.stride + 1;
    g.out_width = (g.width - layer.kernel) / layer.stride + 1;
  }
  return g;
}

// Rows are (channel, ky, kx), columns are output positions; padding reads as 0.
void im2col(const float* sample, const Geometry& g, std::size_t k, std::size_t s, long pad, std::vector<double>& cols) {
  const std::size_t positions = g.out_height * g.out_width;
  cols.assign(g.channels * k * k * positions, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const float* plane = sample + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols.data() + ((c * k + ky) * k + kx) * positions;
        const long xoff = static_cast<long>(kx) - pad;
        const auto [ox_lo, ox_hi] = valid_range(xoff, s, g.width, g.out_width);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          const float* src = plane + static_cast<std::size_t>(iy) * g.width;
          double* dst = row + oy * g.out_width;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
            dst[ox] = src[static_cast<std::size_t>(static_cast<long>(ox * s) + xoff)];
          }
        }
      }
    }
  }
}

// Adds the column gradients back onto the input planes of one sample.
void col2im(const std::vector<double>& cols, const Geometry& g, std::size_t k, std::size_t s, long pad, double* planes) {
  const std::size_t positions = g.out_height * g.out_width;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = planes + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols.data() + ((c * k + ky) * k + kx) * positions;
        const long xoff = static_cast<long>(kx) - pad;
        const auto [ox_lo, ox_hi] = valid_range(xoff, s, g.width, g.out_width);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const double* src = row + oy * g.out_width;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
            dst[static_cast<std::size_t>(static_cast<long>(ox * s) + xoff)] += src[ox];
          }
        }
      }
    }
  }
}

Tensor conv2d_forward(const LayerSpec& layer, const Tensor& input) {
  const Geometry g = spatial_geometry(layer, input);
  const std::size_t k = layer.kernel, outs = layer.out_channels;
  const std::size_t taps = g.channels * k * k, positions = g.out_height * g.out_width;
  Tensor out({g.batch, outs, g.out_height, g.out_width});
  std::vector<double> cols, acc(positions);
  const float* w = layer.weight.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(input.data() + n * g.channels * g.height * g.width, g, k, layer.stride,
           static_cast<long>(layer.padding), cols);
    for (std::size_t o = 0; o < outs; ++o) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(layer.bias[o]));
      for (std::size_t j = 0; j < taps; ++j) {
        const double wv = w[o * taps + j];
        const double* row = cols.data() + j * positions;
        for (std::size_t p = 0; p < positions; ++p) acc[p] += wv * row[p];
      }
      float* dst = out.data() + (n * outs + o) * positions;
      for (std::size_t p = 0; p < positions; ++p) dst[p] = static_cast<float>(acc[p]);
    }
  }
  return out;
}

void conv2d_backward(const LayerSpec& layer, const Tensor& input, const Tensor& dy, Tensor* dx,
                     ParamGrads* grads) {
  const Geometry g = spatial_geometry(layer, input);
  const std::size_t k = layer.kernel, outs = layer.out_channels;
  const long pad = static_cast<long>(layer.padding);
  const std::size_t taps = g.channels * k * k, positions = g.out_height * g.out_width;
  const std::size_t in_size = g.channels * g.height * g.width;
  const float* w = layer.weight.data();

  std::vector<double> dw, db, cols, dcols, dplanes, dout(outs * positions);
  if (grads != nullptr) {
    dw.assign(layer.weight.size(), 0.0);
    db.assign(outs, 0.0);
  }
  if (dx != nullptr) {
    *dx = Tensor(input.shape());
    dplanes.resize(in_size);
  }
  for (std::size_t n = 0; n < g.batch; ++n) {
    const float* d = dy.data() + n * outs * positions;
    for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = d[i];
    if (grads != nullptr) {
      im2col(input.data() + n * in_size, g, k, layer.stride, pad, cols);
      for (std::size_t o = 0; o < outs; ++o) {
        const double* drow = dout.data() + o * positions;
        double bsum = 0.0;
        for (std::size_t p = 0; p < positions; ++p) bsum += drow[p];
        db[o] += bsum;
        for (std::size_t j = 0; j < taps; ++j) {
          const double* row = cols.data() + j * positions;
          double total = 0.0;
          for (std::size_t p = 0; p < positions; ++p) total += drow[p] * row[p];
          dw[o * taps + j] += total;
        }
      }
    }
    if (dx != nullptr) {
      dcols.assign(taps * positions, 0.0);
      for (std::size_t o = 0; o < outs; ++o) {
        const double* drow = dout.data() + o * positions;
        for (std::size_t j = 0; j < taps; ++j) {
          const double wv = w[o * taps + j];
          double* row = dcols.data() + j * positions;
          for (std::size_t p = 0; p < positions; ++p) row[p] += wv * drow[p];
        }
      }
      std::fill(dplanes.begin(), dplanes.end(), 0.0);
      col2im(dcols, g, k, layer.stride, pad, dplanes.data());
      float* dst = dx->data() + n * in_size;
      for (std::size_t i = 0; i < in_size; ++i) dst[i] = static_cast<float>(dplanes[i]);
    }
  }
  if (grads != nullptr) {
    grads->weight = Tensor(layer.weight.shape());
    grads->bias = Tensor(layer.bias.shape());
    for (std::size_t i = 0; i < dw.size(); ++i) grads->weight[i] = static_cast<float>(dw[i]);
    for (std::size_t i = 0; i < outs; ++i) grads->bias[i] = static_cast<float>(db[i]);
  }
}

Tensor dense_forward(const LayerSpec& layer, const Tensor& input) {
  const std::size_t batch = input.dim(0), in = layer.in_channels, outs = layer.out_channels;
  Tensor out({batch, outs});
  for (std::size_t n = 0; n < batch; ++n) {
    const float* x = input.data() + n * in;
    for (std::size_t o = 0; o < outs; ++o) {
      const float* w = layer.weight.data() + o * in;
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(w[i]) * x[i];
      out[n * outs + o] = static_cast<float>(acc);
    }
  }
  return out;
}

void dense_backward(const LayerSpec& layer, const Tensor& input, const Tensor& dy, Tensor* dx,
                    ParamGrads* grads) {
  const std::size_t batch = input.dim(0), in = layer.in_channels, outs = layer.out_channels;
  if (grads != nullptr) {
    grads->weight = Tensor(layer.weight.shape());
    grads->bias = Tensor(layer.bias.shape());
    for (std::size_t o = 0; o < outs; ++o) {
      double bsum = 0.0;
      for (std::size_t n = 0; n < batch; ++n) bsum += dy[n * outs + o];
      grads->bias[o] = static_cast<float>(bsum);
      for (std::size_t i = 0; i < in; ++i) {
        double total = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
          total += static_cast<double>(dy[n * outs + o]) * input[n * in + i];
        }
        grads->weight[o * in + i] = static_cast<float>(total);
      }
    }
  }
  if (dx != nullptr) {
    *dx = Tensor(input.shape());
    std::vector<double> acc(in);
    for (std::size_t n = 0; n < batch; ++n) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t o = 0; o < outs; ++o) {
        const double g = dy[n * outs + o];
        const float* w = layer.weight.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) acc[i] += g * w[i];
      }
      for (std::size_t i = 0; i < in; ++i) (*dx)[n * in + i] = static_cast<float>(acc[i]);
    }
  }
}

Tensor pool_forward(const LayerSpec& layer, const Tensor& input, std::vector<std::uint32_t>* argmax) {
  const Geometry g = spatial_geometry(layer, input);
  const std::size_t k = layer.kernel, s = layer.stride;
  Tensor out({g.batch, g.channels, g.out_height, g.out_width});
  const bool is_max = layer.kind == LayerKind::maxpool2d;
  if (is_max && argmax != nullptr) argmax->assign(out.size(), 0);
  const double inv_area = 1.0 / static_cast<double>(k * k);
  std::size_t j = 0;
  for (std::size_t plane = 0; plane < g.batch * g.channels; ++plane) {
    const std::size_t base = plane * g.height * g.width;
    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
      for (std::size_t ox = 0; ox < g.out_width; ++ox, ++j) {
        if (is_max) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_index = base + oy * s * g.width + ox * s;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t idx = base + (oy * s + ky) * g.width + ox * s + kx;
              if (input[idx] > best) {
                best = input[idx];
                best_index = idx;
              }
            }
          }
          out[j] = best;
          if (argmax != nullptr) (*argmax)[j] = static_cast<std::uint32_t>(best_index);
        } else {
          double total = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              total += input[base + (oy * s + ky) * g.width + ox * s + kx];
            }
          }
          out[j] = static_cast<float>(total * inv_area);
        }
      }
    }
  }
  return out;
}

Tensor avgpool_backward(const LayerSpec& layer, const Tensor& input, const Tensor& dy) {
  const Geometry g = spatial_geometry(layer, input);
  const std::size_t k = layer.kernel, s = layer.stride;
  const double inv_area = 1.0 / static_cast<double>(k * k);
  std::vector<double> acc(input.size(), 0.0);
  std::size_t j = 0;
  for (std::size_t plane = 0; plane < g.batch * g.channels; ++plane) {
    const std::size_t base = plane * g.height * g.width;
    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
      for (std::size_t ox = 0; ox < g.out_width; ++ox, ++j) {
        const double share = dy[j] * inv_area;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            acc[base + (oy * s + ky) * g.width + ox * s + kx] += share;
          }
        }
      }
    }
  }
  Tensor dx(input.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<float>(acc[i]);
  return dx;
}

Tensor apply_layer(const LayerSpec& layer, const Tensor& input, std::vector<std::uint32_t>* argmax) {
  switch (layer.kind) {
    case LayerKind::conv2d: return conv2d_forward(layer, input);
    case LayerKind::dense: return dense_forward(layer, input);
    case LayerKind::relu: {
      Tensor out = input;
      for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
      return out;
    }
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d: return pool_forward(layer, input, argmax);
    case LayerKind::flatten: return input.reshaped({input.dim(0), input.size() / input.dim(0)});
  }
  return input;
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) noexcept {
  for (LayerKind kind : {LayerKind::conv2d, LayerKind::dense, LayerKind::relu, LayerKind::maxpool2d,
                         LayerKind::avgpool2d, LayerKind::flatten}) {
    if (layer_kind_name(kind) == name) return kind;
  }
  return std::nullopt;
}

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  LayerSpec layer;
  layer.kind = LayerKind::conv2d;
  layer.in_channels = in;
  layer.out_channels = out;
  layer.kernel = kernel;
  layer.stride = stride;
  layer.padding = padding;
  layer.weight = Tensor({out, in, kernel, kernel});
  layer.bias = Tensor({out});
  return layer;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec layer;
  layer.kind = LayerKind::dense;
  layer.in_channels = in;
  layer.out_channels = out;
  layer.weight = Tensor({out, in});
  layer.bias = Tensor({out});
  return layer;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool2d(std::size_t kernel, std::size_t stride) {
  LayerSpec layer;
  layer.kind = LayerKind::maxpool2d;
  layer.kernel = kernel;
  layer.stride = stride;
  return layer;
}

LayerSpec LayerSpec::avgpool2d(std::size_t kernel, std::size_t stride) {
  LayerSpec layer = maxpool2d(kernel, stride);
  layer.kind = LayerKind::avgpool2d;
  return layer;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec layer;
  layer.kind = LayerKind::flatten;
  return layer;
}

Shape infer_layer_shape(const LayerSpec& layer, const Shape& input, std::size_t index) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      if (input.size() != 3) throw shape_error(index, layer.kind, "expects C x H x W input, got " + shape_string(input));
      if (input[0] != layer.in_channels) {
        throw shape_error(index, layer.kind, "expects " + std::to_string(layer.in_channels) +
                                                 " input channels, got " + std::to_string(input[0]));
      }
      if (layer.kernel == 0 || layer.stride == 0) throw shape_error(index, layer.kind, "kernel and stride must be positive");
      if (layer.weight.shape() != Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel} ||
          layer.bias.shape() != Shape{layer.out_channels}) {
        throw shape_error(index, layer.kind, "weight/bias shapes disagree with channel counts");
      }
      if (input[1] + 2 * layer.padding < layer.kernel || input[2] + 2 * layer.padding < layer.kernel) {
        throw shape_error(index, layer.kind, "kernel larger than padded input " + shape_string(input));
      }
      return {layer.out_channels, (input[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1,
              (input[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::dense: {
      if (input.size() != 1 || input[0] != layer.in_channels) {
        throw shape_error(index, layer.kind, "expects [" + std::to_string(layer.in_channels) +
                                                 "] input, got " + shape_string(input));
      }
      if (layer.weight.shape() != Shape{layer.out_channels, layer.in_channels} ||
          layer.bias.shape() != Shape{layer.out_channels}) {
        throw shape_error(index, layer.kind, "weight/bias shapes disagree with feature counts");
      }
      return {layer.out_channels};
    }
    case LayerKind::relu: return input;
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d: {
      if (input.size() != 3) throw shape_error(index, layer.kind, "expects C x H x W input, got " + shape_string(input));
      if (layer.kernel == 0 || layer.stride == 0 || input[1] < layer.kernel || input[2] < layer.kernel) {
        throw shape_error(index, layer.kind, "window does not fit input " + shape_string(input));
      }
      return {input[0], (input[1] - layer.kernel) / layer.stride + 1,
              (input[2] - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::flatten: return {shape_product(input)};
  }
  return input;
}

Shape infer_output_shape(std::span<const LayerSpec> layers, const Shape& input) {
  Shape shape = input;
  for (std::size_t i = 0; i < layers.size(); ++i) shape = infer_layer_shape(layers[i], shape, i);
  return shape;
}

Tensor forward(std::span<const LayerSpec> layers, const Tensor& batch, Tape* tape) {
  Shape shape = sample_shape(batch);
  if (tape != nullptr) {
    tape->inputs.clear();
    tape->argmax.assign(layers.size(), {});
    tape->inputs.reserve(layers.size() + 1);
  }
  Tensor current = batch;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    shape = infer_layer_shape(layers[i], shape, i);
    Tensor next = apply_layer(layers[i], current, tape != nullptr ? &tape->argmax[i] : nullptr);
    if (tape != nullptr) {
      tape->inputs.push_back(std::move(current));
    }
    current = std::move(next);
  }
  if (tape != nullptr) tape->inputs.push_back(current);
  return current;
}

Backprop backward(std::span<const LayerSpec> layers, const Tape& tape, const Tensor& output_grad,
                  const GradSelector& select) {
  if (tape.inputs.size() != layers.size() + 1) {
    throw Error(ErrorCode::precondition, "tape does not match layer list");
  }
  if (output_grad.shape() != tape.inputs.back().shape()) {
    throw Error(ErrorCode::shape_mismatch, "output gradient shape " + shape_string(output_grad.shape()) +
                                               " differs from output " + shape_string(tape.inputs.back().shape()));
  }
  Backprop result;
  result.params.resize(layers.size());
  std::vector<bool> wanted(layers.size(), false);
  std::size_t lowest = layers.size();
  for (std::size_t index : select.layers) {
    if (index >= layers.size()) throw Error(ErrorCode::precondition, "selector names layer " + std::to_string(index) + " beyond the model");
    if (!layers[index].has_parameters()) {
      throw Error(ErrorCode::non_differentiable, "layer " + std::to_string(index) + " (" +
                                                     std::string(layer_kind_name(layers[index].kind)) +
                                                     ") has no parameters");
    }
    wanted[index] = true;
    lowest = std::min(lowest, index);
  }
  const std::size_t stop = select.input ? 0 : lowest;

  Tensor grad = output_grad;
  for (std::size_t step = layers.size(); step-- > 0;) {
    if (step < stop) break;
    const LayerSpec& layer = layers[step];
    const Tensor& input = tape.inputs[step];
    const bool need_dx = step > stop || select.input;
    Tensor dx;
    switch (layer.kind) {
      case LayerKind::conv2d:
        conv2d_backward(layer, input, grad, need_dx ? &dx : nullptr, wanted[step] ? &result.params[step] : nullptr);
        break;
      case LayerKind::dense:
        dense_backward(layer, input, grad, need_dx ? &dx : nullptr, wanted[step] ? &result.params[step] : nullptr);
        break;
      case LayerKind::relu:
        dx = Tensor(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) dx[i] = input[i] > 0.0f ? grad[i] : 0.0f;
        break;
      case LayerKind::maxpool2d: {
        dx = Tensor(input.shape());
        const auto& argmax = tape.argmax[step];
        if (argmax.size() != grad.size()) throw Error(ErrorCode::precondition, "tape lacks maxpool indices");
        for (std::size_t j = 0; j < grad.size(); ++j) dx[argmax[j]] += grad[j];
        break;
      }
      case LayerKind::avgpool2d: dx = avgpool_backward(layer, input, grad); break;
      case LayerKind::flatten: dx = grad.reshaped(input.shape()); break;
    }
    grad = std::move(dx);
  }
  if (select.input) result.input_grad = std::move(grad);
  return result;
}

LossAndGrad loss_and_grad(std::span<const LayerSpec> layers, const Tensor& batch, const LossFn& loss,
                          const GradSelector& select) {
  Tape tape;
  const Tensor logits = forward(layers, batch, &tape);
  Tensor logits_grad(logits.shape());
  LossAndGrad out;
  out.loss = loss(logits, logits_grad);
  Backprop bp = backward(layers, tape, logits_grad, select);
  out.input_grad = std::move(bp.input_grad);
  out.params = std::move(bp.params);
  return out;
}

GradSelector all_parameters(std::span<const LayerSpec> layers) {
  GradSelector select;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].has_parameters()) select.layers.push_back(i);
  }
  return select;
}

std::vector<std::size_t> predict(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), classes = logits.size() / rows;
  std::vector<std::size_t> labels(rows);
  for (std::size_t n = 0; n < rows; ++n) {
    const float* row = logits.data() + n * classes;
    labels[n] = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
  }
  return labels;
}

}  // namespace exray
