#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace exray {

using Rng = std::mt19937_64;

/// Named sub-seed: mixes a base seed with a label and integer coordinates so
/// every consumer draws from its own stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label,
                          std::initializer_list<std::uint64_t> parts = {});

/// Uniformly random permutation of 0..count-1.
std::vector<std::size_t> random_permutation(std::size_t count, Rng& rng);

double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

}  // namespace exray
