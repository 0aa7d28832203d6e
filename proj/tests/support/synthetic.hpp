#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "exray/differencing.hpp"
#include "exray/rng.hpp"

namespace exray::testing {

/// Two classes of n-channel feature vectors under a linear head h.
struct SyntheticPair {
  std::vector<LayerSpec> h;
  Tensor feat_a, feat_b;  // N x n
  std::size_t label_a = 0, label_b = 1;
  std::vector<std::size_t> key;  // channels that carry the class difference
};

inline float draw(Rng& rng, double lo, double hi) { return static_cast<float>(uniform(rng, lo, hi)); }

/// Classes differ only in channel k: high for A, low for B. Other channels are
/// identically distributed noise that h weighs lightly.
inline SyntheticPair channel_model(std::uint64_t seed, std::size_t n = 8, std::size_t samples = 20,
                                   double scale = 4.0) {
  Rng rng(derive_seed(seed, "channel-model"));
  SyntheticPair p;
  const std::size_t k = static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(n))) % n;
  p.key = {k};
  p.feat_a = Tensor({samples, n});
  p.feat_b = Tensor({samples, n});
  for (std::size_t j = 0; j < samples; ++j) {
    for (std::size_t c = 0; c < n; ++c) {
      p.feat_a[j * n + c] = c == k ? draw(rng, 0.8, 1.0) : draw(rng, 0.0, 1.0);
      p.feat_b[j * n + c] = c == k ? draw(rng, 0.0, 0.2) : draw(rng, 0.0, 1.0);
    }
  }
  LayerSpec dense = LayerSpec::dense(n, 2);
  for (std::size_t c = 0; c < n; ++c) {
    const float w = c == k ? static_cast<float>(scale) : draw(rng, -0.05, 0.05);
    dense.weight[c] = w;
    dense.weight[n + c] = -w;
  }
  dense.bias[0] = static_cast<float>(-0.5 * scale);
  dense.bias[1] = static_cast<float>(0.5 * scale);
  p.h = {dense};
  return p;
}

/// B samples are A samples with channels j and k suppressed to zero. h calls a
/// sample A only when both channels are present, with j weighted above k.
inline SyntheticPair suppression_model(std::uint64_t seed, std::size_t n = 8, std::size_t samples = 20,
                                       double scale = 4.0) {
  Rng rng(derive_seed(seed, "suppression-model"));
  SyntheticPair p;
  const std::size_t j = seed % n, k = (seed + 3) % n;
  p.key = {j, k};
  p.feat_a = Tensor({samples, n});
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t c = 0; c < n; ++c) p.feat_a[s * n + c] = (c == j || c == k) ? draw(rng, 0.8, 1.0) : draw(rng, 0.0, 1.0);
  }
  p.feat_b = p.feat_a;
  for (std::size_t s = 0; s < samples; ++s) {
    p.feat_b[s * n + j] = 0.0f;
    p.feat_b[s * n + k] = 0.0f;
  }
  LayerSpec dense = LayerSpec::dense(n, 2);
  for (const auto& [c, w] : {std::pair{j, 1.0}, std::pair{k, 0.6}}) {
    dense.weight[c] = static_cast<float>(w * scale);
    dense.weight[n + c] = static_cast<float>(-w * scale);
  }
  dense.bias[0] = static_cast<float>(-1.2 * scale);
  dense.bias[1] = static_cast<float>(1.2 * scale);
  p.h = {dense};
  return p;
}

struct BinaryOracle {
  std::size_t min_size = 0;
  std::vector<std::uint32_t> minimal;  // every feasible binary mask of min_size, as bit sets
};

/// Exhaustive search over all 2^n binary masks on the pairing optimize_mask uses.
inline BinaryOracle exhaustive_oracle(const SyntheticPair& p, const DiffConfig& cfg,
                                      Pairing pairing = Pairing::random) {
  const std::size_t n = p.feat_a.dim(1);
  const auto pairs = make_pairs(p.feat_a.dim(0), p.feat_b.dim(0), p.label_a, p.label_b, cfg.seed, pairing);
  BinaryOracle oracle;
  oracle.min_size = n + 1;
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    const auto size = static_cast<std::size_t>(std::popcount(bits));
    if (size > oracle.min_size) continue;
    FeatureMask mask({n});
    for (std::size_t c = 0; c < n; ++c) mask[c] = (bits >> c) & 1u ? 1.0f : 0.0f;
    const FlipAccuracy acc = flip_accuracy(p.h, p.feat_a, p.label_a, p.feat_b, p.label_b, mask, pairs);
    if (!mask_feasible(cfg.mode, acc.forward, acc.backward)) continue;
    if (size < oracle.min_size) {
      oracle.min_size = size;
      oracle.minimal.clear();
    }
    oracle.minimal.push_back(bits);
  }
  return oracle;
}

inline std::uint32_t support_bits(const FeatureMask& mask, float cut = 0.5f) {
  std::uint32_t bits = 0;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c] > cut) bits |= 1u << c;
  }
  return bits;
}

/// Support of `mask` covers at least one minimum feasible binary mask.
inline bool covers_minimum(const FeatureMask& mask, const BinaryOracle& oracle) {
  const std::uint32_t support = support_bits(mask);
  for (std::uint32_t m : oracle.minimal) {
    if ((support & m) == m) return true;
  }
  return false;
}

}  // namespace exray::testing
