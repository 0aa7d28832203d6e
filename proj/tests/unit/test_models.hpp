#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "exray/engine.hpp"
#include "exray/model_io.hpp"
#include "exray/rng.hpp"

namespace exray::testing {

inline void randomize(Tensor& t, Rng& rng, double scale) {
  for (float& v : t.values()) v = static_cast<float>(uniform(rng, -scale, scale));
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

/// Two conv blocks + dense head on 3x16x16 inputs, random weights.
inline ModelGraph small_cnn(std::uint64_t seed, std::size_t classes = 5) {
  Rng rng(seed);
  ModelGraph model;
  model.id = "small-cnn";
  model.input_shape = {3, 16, 16};
  model.class_count = classes;
  model.layers = {LayerSpec::conv2d(3, 8, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
                  LayerSpec::conv2d(8, 16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
                  LayerSpec::flatten(), LayerSpec::dense(256, classes)};
  for (LayerSpec& layer : model.layers) {
    if (!layer.has_parameters()) continue;
    const double fan_in = static_cast<double>(layer.weight.size() / layer.out_channels);
    randomize(layer.weight, rng, std::sqrt(6.0 / fan_in));
    randomize(layer.bias, rng, 0.1);
  }
  return model;
}

}  // namespace exray::testing
