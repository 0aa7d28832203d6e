#include "exray/differencing.hpp"

#include <algorithm>
#include <cstring>
#include <tuple>

#include "exray/adam.hpp"
#include "exray/error.hpp"
#include "exray/loss.hpp"
#include "exray/rng.hpp"

namespace exray {

namespace {

struct Layout {
  std::size_t batch, channels, block;
};

Layout layout_of(const Tensor& feat, const FeatureMask& mask) {
  if (feat.rank() < 2) {
    throw Error(ErrorCode::shape_mismatch, "feature batch must be N x n x ..., got " + shape_string(feat.shape()));
  }
  if (mask.rank() != 1 || mask.size() != feat.dim(1)) {
    throw Error(ErrorCode::shape_mismatch, "mask of length " + std::to_string(mask.size()) + " does not match " +
                                               std::to_string(feat.dim(1)) + " feature channels");
  }
  return {feat.dim(0), feat.dim(1), feat.size() / (feat.dim(0) * feat.dim(1))};
}

Tensor gather_rows(const Tensor& batch, const std::vector<std::size_t>& rows) {
  Shape shape = batch.shape();
  const std::size_t stride = batch.size() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    std::memcpy(out.data() + j * stride, batch.data() + rows[j] * stride, stride * sizeof(float));
  }
  return out;
}

DiffMode mirrored(DiffMode mode) {
  switch (mode) {
    case DiffMode::one_sided_v_to_t: return DiffMode::one_sided_t_to_v;
    case DiffMode::one_sided_t_to_v: return DiffMode::one_sided_v_to_t;
    default: return mode;
  }
}

// Both blend directions stacked into one 2N batch: rows [0,N) are
// blend(v, t, M) and rows [N,2N) are blend(t, v, M).
Tensor blend_both(const Tensor& feat_v, const Tensor& feat_t, const FeatureMask& mask) {
  const Layout l = layout_of(feat_v, mask);
  Shape shape = feat_v.shape();
  shape[0] *= 2;
  Tensor out(shape);
  const std::size_t row = l.channels * l.block, half = l.batch * row;
  for (std::size_t j = 0; j < l.batch; ++j) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const float m = mask[c];
      const std::size_t base = j * row + c * l.block;
      for (std::size_t s = 0; s < l.block; ++s) {
        const float v = feat_v[base + s], t = feat_t[base + s];
        out[base + s] = m * v + (1.0f - m) * t;
        out[half + base + s] = m * t + (1.0f - m) * v;
      }
    }
  }
  return out;
}

std::pair<double, double> flip_rates(const Tensor& logits, std::size_t pairs, std::size_t label_v,
                                     std::size_t label_t) {
  const auto predicted = predict(logits);
  std::size_t forward = 0, backward = 0;
  for (std::size_t j = 0; j < pairs; ++j) {
    forward += predicted[j] == label_v;
    backward += predicted[pairs + j] == label_t;
  }
  const auto n = static_cast<double>(pairs);
  return {static_cast<double>(forward) / n, static_cast<double>(backward) / n};
}

void check_labels(const Tensor& feat_a, std::size_t label_a, const Tensor& feat_b, std::size_t label_b) {
  if (label_a == label_b) throw Error(ErrorCode::precondition, "mask optimization needs two different labels");
  if (feat_a.rank() < 2 || feat_b.rank() < 2 || sample_shape(feat_a) != sample_shape(feat_b)) {
    throw Error(ErrorCode::shape_mismatch, "feature batches " + shape_string(feat_a.shape()) + " and " +
                                               shape_string(feat_b.shape()) + " are incompatible");
  }
  if (feat_a.dim(0) < 2 || feat_b.dim(0) < 2) {
    throw Error(ErrorCode::insufficient_samples, "class " + std::to_string(feat_a.dim(0) < 2 ? label_a : label_b) +
                                                     " has fewer than 2 samples");
  }
}

MaskResult optimize_canonical(std::span<const LayerSpec> h, const Tensor& feat_a, std::size_t label_a,
                              const Tensor& feat_b, std::size_t label_b, const DiffConfig& cfg, Pairing pairing) {
  const auto pairs = make_pairs(feat_a.dim(0), feat_b.dim(0), label_a, label_b, cfg.seed, pairing);
  std::vector<std::size_t> rows_a, rows_b;
  for (const auto& [a, b] : pairs) {
    rows_a.push_back(a);
    rows_b.push_back(b);
  }
  const Tensor fv = gather_rows(feat_a, rows_a), ft = gather_rows(feat_b, rows_b);

  const std::size_t n = feat_a.dim(1);
  FeatureMask mask({n}, 1.0f);
  FeatureMask grad({n});
  AdamState adam = make_adam_state(std::span<const Tensor>(&mask, 1), cfg.lr);

  MaskResult result;
  result.trace.reserve(cfg.epochs + 1);
  bool have_best = false;
  for (std::size_t epoch = 0;; ++epoch) {
    const PairLoss pl = pair_loss(h, fv, ft, mask, label_a, label_b, cfg, epoch == cfg.epochs ? nullptr : &grad);
    const double sum = mask.sum();
    result.trace.push_back({pl.loss, sum});
    const bool ok = mask_feasible(cfg.mode, pl.flip_acc_forward, pl.flip_acc_backward);
    // Epoch 0 is the all-ones fallback; later iterates replace it only when feasible and smaller.
    if (epoch == 0 || (ok && (!have_best || sum < result.mask_sum))) {
      result.mask = mask;
      result.mask_sum = sum;
      result.feasible = ok;
      result.fallback = epoch == 0;
      result.flip_acc_forward = pl.flip_acc_forward;
      result.flip_acc_backward = pl.flip_acc_backward;
      have_best = ok;
    }
    if (epoch == cfg.epochs) break;
    adam_step(mask, grad, adam);
    for (float& v : mask.values()) v = std::clamp(v, 0.0f, 1.0f);
  }
  return result;
}

}  // namespace

std::string_view diff_mode_name(DiffMode mode) noexcept {
  switch (mode) {
    case DiffMode::symmetric: return "symmetric";
    case DiffMode::one_sided_v_to_t: return "one_sided_v_to_t";
    case DiffMode::one_sided_t_to_v: return "one_sided_t_to_v";
  }
  return "symmetric";
}

DiffMode parse_diff_mode(std::string_view text) {
  for (DiffMode m : {DiffMode::symmetric, DiffMode::one_sided_v_to_t, DiffMode::one_sided_t_to_v}) {
    if (diff_mode_name(m) == text) return m;
  }
  throw Error(ErrorCode::invalid_config, "unknown differencing mode '" + std::string(text) + "'");
}

void validate_diff_config(const DiffConfig& cfg) {
  if (!(cfg.alpha > 0.0)) throw Error(ErrorCode::invalid_config, "alpha must be positive");
  if (!(cfg.w_large > cfg.w_small && cfg.w_small > 0.0)) {
    throw Error(ErrorCode::invalid_config, "barrier weights need w_large > w_small > 0");
  }
  if (cfg.epochs < 1) throw Error(ErrorCode::invalid_config, "epochs must be at least 1");
  if (!(cfg.lr > 0.0)) throw Error(ErrorCode::invalid_config, "lr must be positive");
}

Tensor blend(const Tensor& feat_a, const Tensor& feat_b, const FeatureMask& mask) {
  if (feat_a.shape() != feat_b.shape() || feat_a.rank() < 1) {
    throw Error(ErrorCode::shape_mismatch, "blend needs equally shaped features, got " + shape_string(feat_a.shape()) +
                                               " and " + shape_string(feat_b.shape()));
  }
  Shape batched{1};
  batched.insert(batched.end(), feat_a.shape().begin(), feat_a.shape().end());
  return blend_batch(feat_a.reshaped(batched), feat_b.reshaped(batched), mask).reshaped(feat_a.shape());
}

Tensor blend_batch(const Tensor& feat_a, const Tensor& feat_b, const FeatureMask& mask) {
  if (feat_a.shape() != feat_b.shape()) {
    throw Error(ErrorCode::shape_mismatch, "blend needs equally shaped features, got " + shape_string(feat_a.shape()) +
                                               " and " + shape_string(feat_b.shape()));
  }
  const Layout l = layout_of(feat_a, mask);
  Tensor out(feat_a.shape());
  for (std::size_t j = 0; j < l.batch; ++j) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const float m = mask[c];
      const std::size_t base = (j * l.channels + c) * l.block;
      for (std::size_t s = 0; s < l.block; ++s) out[base + s] = m * feat_a[base + s] + (1.0f - m) * feat_b[base + s];
    }
  }
  return out;
}

PairLoss pair_loss(std::span<const LayerSpec> h, const Tensor& feat_v, const Tensor& feat_t, const FeatureMask& mask,
                   std::size_t label_v, std::size_t label_t, const DiffConfig& cfg, FeatureMask* mask_grad) {
  if (feat_v.shape() != feat_t.shape()) {
    throw Error(ErrorCode::shape_mismatch, "paired feature batches differ in shape");
  }
  const Layout l = layout_of(feat_v, mask);
  const Tensor both = blend_both(feat_v, feat_t, mask);
  Tape tape;
  const Tensor logits = forward(h, both, mask_grad != nullptr ? &tape : nullptr);
  if (logits.rank() != 2) throw Error(ErrorCode::shape_mismatch, "head must produce N x K logits");
  const std::size_t classes = logits.dim(1);

  const bool use_forward = cfg.mode != DiffMode::one_sided_v_to_t;
  const bool use_backward = cfg.mode != DiffMode::one_sided_t_to_v;
  PairLoss out;
  const double size_term = mask.sum() / static_cast<double>(l.channels);
  Tensor logits_grad(logits.shape());
  double total = 0.0;
  for (std::size_t j = 0; j < l.batch; ++j) {
    const auto row1 = std::span<const float>(logits.data() + j * classes, classes);
    const auto row2 = std::span<const float>(logits.data() + (l.batch + j) * classes, classes);
    const auto grad1 = std::span<float>(logits_grad.data() + j * classes, classes);
    const auto grad2 = std::span<float>(logits_grad.data() + (l.batch + j) * classes, classes);
    const double ce1 = cross_entropy(row1, label_v, grad1);
    const double ce2 = cross_entropy(row2, label_t, grad2);
    const double w1 = use_forward ? (ce1 > cfg.alpha ? cfg.w_large : cfg.w_small) : 0.0;
    const double w2 = use_backward ? (ce2 > cfg.alpha ? cfg.w_large : cfg.w_small) : 0.0;
    total += size_term + w1 * ce1 + w2 * ce2;
    out.ce1 += ce1;
    out.ce2 += ce2;
    for (float& g : grad1) g = static_cast<float>(g * w1);
    for (float& g : grad2) g = static_cast<float>(g * w2);
  }
  out.loss = total;
  std::tie(out.flip_acc_forward, out.flip_acc_backward) = flip_rates(logits, l.batch, label_v, label_t);

  if (mask_grad != nullptr) {
    const Tensor dx = backward(h, tape, logits_grad, GradSelector{true, {}}).input_grad;
    *mask_grad = FeatureMask({l.channels});
    const std::size_t row = l.channels * l.block, half = l.batch * row;
    for (std::size_t c = 0; c < l.channels; ++c) {
      double acc = static_cast<double>(l.batch) / static_cast<double>(l.channels);
      for (std::size_t j = 0; j < l.batch; ++j) {
        const std::size_t base = j * row + c * l.block;
        for (std::size_t s = 0; s < l.block; ++s) {
          const double diff = static_cast<double>(feat_v[base + s]) - feat_t[base + s];
          acc += (static_cast<double>(dx[base + s]) - dx[half + base + s]) * diff;
        }
      }
      (*mask_grad)[c] = static_cast<float>(acc);
    }
  }
  return out;
}

bool mask_feasible(DiffMode mode, double forward, double backward, double threshold) {
  switch (mode) {
    case DiffMode::one_sided_t_to_v: return forward >= threshold;
    case DiffMode::one_sided_v_to_t: return backward >= threshold;
    default: return forward >= threshold && backward >= threshold;
  }
}

std::vector<std::pair<std::size_t, std::size_t>> make_pairs(std::size_t count_a, std::size_t count_b,
                                                            std::size_t label_a, std::size_t label_b,
                                                            std::uint64_t seed, Pairing pairing) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (pairing == Pairing::identity) {
    if (count_a != count_b) {
      throw Error(ErrorCode::precondition, "identity pairing needs equally sized sets, got " + std::to_string(count_a) +
                                               " and " + std::to_string(count_b));
    }
    for (std::size_t j = 0; j < count_a; ++j) pairs.emplace_back(j, j);
    return pairs;
  }
  const bool swapped = label_a > label_b;
  Rng rng(derive_seed(seed, "pairing", {std::min(label_a, label_b), std::max(label_a, label_b)}));
  const auto perm_lo = random_permutation(swapped ? count_b : count_a, rng);
  const auto perm_hi = random_permutation(swapped ? count_a : count_b, rng);
  const std::size_t m = std::min(count_a, count_b);
  for (std::size_t j = 0; j < m; ++j) {
    pairs.emplace_back(swapped ? perm_hi[j] : perm_lo[j], swapped ? perm_lo[j] : perm_hi[j]);
  }
  return pairs;
}

MaskResult optimize_mask_features(std::span<const LayerSpec> h, const Tensor& feat_a, std::size_t label_a,
                                  const Tensor& feat_b, std::size_t label_b, const DiffConfig& cfg, Pairing pairing) {
  validate_diff_config(cfg);
  check_labels(feat_a, label_a, feat_b, label_b);
  if (label_a < label_b) return optimize_canonical(h, feat_a, label_a, feat_b, label_b, cfg, pairing);
  DiffConfig flipped = cfg;
  flipped.mode = mirrored(cfg.mode);
  MaskResult r = optimize_canonical(h, feat_b, label_b, feat_a, label_a, flipped, pairing);
  std::swap(r.flip_acc_forward, r.flip_acc_backward);
  return r;
}

MaskResult optimize_mask(const SplitModel& split, std::span<const Tensor> x_a, std::size_t label_a,
                         std::span<const Tensor> x_b, std::size_t label_b, const DiffConfig& cfg, Pairing pairing) {
  if (x_a.size() < 2 || x_b.size() < 2) {
    throw Error(ErrorCode::insufficient_samples, "class " + std::to_string(x_a.size() < 2 ? label_a : label_b) +
                                                     " has fewer than 2 samples");
  }
  return optimize_mask_features(split.h, features_of(split, stack(x_a)), label_a, features_of(split, stack(x_b)),
                                label_b, cfg, pairing);
}

FlipAccuracy flip_accuracy(std::span<const LayerSpec> h, const Tensor& feat_a, std::size_t label_a,
                           const Tensor& feat_b, std::size_t label_b, const FeatureMask& mask,
                           std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::precondition, "no sample pairs");
  std::vector<std::size_t> rows_a, rows_b;
  for (const auto& [a, b] : pairs) {
    rows_a.push_back(a);
    rows_b.push_back(b);
  }
  const Tensor both = blend_both(gather_rows(feat_a, rows_a), gather_rows(feat_b, rows_b), mask);
  const auto [fwd, bwd] = flip_rates(forward(h, both), pairs.size(), label_a, label_b);
  return {fwd, bwd};
}

}  // namespace exray
