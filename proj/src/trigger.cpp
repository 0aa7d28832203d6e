#include "exray/trigger.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "exray/adam.hpp"
#include "exray/engine.hpp"
#include "exray/error.hpp"
#include "exray/loss.hpp"
#include "exray/parallel.hpp"
#include "exray/rng.hpp"
#include "exray/ssim.hpp"

namespace exray {

namespace {

struct ImageDims {
  std::size_t batch, channels, height, width;
};

ImageDims dims_of(const Tensor& x) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw Error(ErrorCode::shape_mismatch, "trigger expects C x H x W or N x C x H x W, got " + shape_string(x.shape()));
}

Tensor stamp_patch(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
  const ImageDims d = dims_of(x);
  if (mask.shape() != Shape{d.height, d.width} || pattern.shape() != Shape{d.channels, d.height, d.width}) {
    throw Error(ErrorCode::shape_mismatch, "patch trigger shape does not match image " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const std::size_t plane = d.height * d.width;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      const std::size_t base = (n * d.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const float m = mask[i];
        out[base + i] = (1.0f - m) * x[base + i] + m * pattern[c * plane + i];
      }
    }
  }
  return out;
}

// Writes the filtered batch into `out`; `inside` marks pixels left unclamped.
Tensor stamp_filter(const Tensor& x, const ColorTransform& t, std::vector<unsigned char>* inside) {
  const ImageDims d = dims_of(x);
  if (d.channels != 3) throw Error(ErrorCode::shape_mismatch, "filter triggers need 3-channel images");
  Tensor out(x.shape());
  const std::size_t plane = d.height * d.width;
  if (inside != nullptr) inside->assign(x.size(), 0);
  for (std::size_t n = 0; n < d.batch; ++n) {
    const std::size_t base = n * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const float r = x[base + i], g = x[base + plane + i], b = x[base + 2 * plane + i];
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = t.matrix[c * 3] * r + t.matrix[c * 3 + 1] * g + t.matrix[c * 3 + 2] * b + t.bias[c];
        const std::size_t idx = base + c * plane + i;
        out[idx] = std::clamp(v, 0.0f, 1.0f);
        if (inside != nullptr) (*inside)[idx] = v > 0.0f && v < 1.0f;
      }
    }
  }
  return out;
}

double success_fraction(const Tensor& logits, std::size_t target) {
  const auto predicted = predict(logits);
  const auto hits = std::count(predicted.begin(), predicted.end(), target);
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

void clamp_unit(Tensor& t) {
  for (float& v : t.values()) v = std::clamp(v, 0.0f, 1.0f);
}

void check_victims(std::span<const Tensor> victims, std::size_t victim, std::size_t target, const ModelGraph& model) {
  if (victims.empty()) throw Error(ErrorCode::precondition, "no victim samples");
  if (victim == target) throw Error(ErrorCode::precondition, "victim and target labels must differ");
  if (target >= model.class_count || victim >= model.class_count) {
    throw Error(ErrorCode::precondition, "class label out of range");
  }
}

}  // namespace

std::string_view trigger_kind_name(TriggerKind kind) noexcept {
  return kind == TriggerKind::patch ? "patch" : "filter";
}

TriggerCandidate TriggerCandidate::patch(std::size_t victim, std::size_t target, Tensor pixel_mask, Tensor pattern) {
  TriggerCandidate t;
  t.kind = TriggerKind::patch;
  t.victim = victim;
  t.target = target;
  t.size_px = pixel_mask.sum();
  t.pixel_mask = std::move(pixel_mask);
  t.pattern = std::move(pattern);
  return t;
}

TriggerCandidate TriggerCandidate::filter(std::size_t victim, std::size_t target, ColorTransform transform) {
  TriggerCandidate t;
  t.kind = TriggerKind::filter;
  t.victim = victim;
  t.target = target;
  t.transform = transform;
  return t;
}

void validate_scan_config(const ScanConfig& cfg) {
  if (!(cfg.max_trigger_px > 0.0)) throw Error(ErrorCode::invalid_config, "max_trigger_px must be positive");
  if (!(cfg.ssim_bound > 0.0 && cfg.ssim_bound <= 1.0)) throw Error(ErrorCode::invalid_config, "ssim_bound must lie in (0,1]");
  if (!(cfg.asr_threshold > 0.0 && cfg.asr_threshold <= 1.0)) {
    throw Error(ErrorCode::invalid_config, "asr_threshold must lie in (0,1]");
  }
  if (!(cfg.re_lr > 0.0 && cfg.filter_lr > 0.0 && cfg.lambda_init > 0.0 && cfg.lambda_factor > 1.0)) {
    throw Error(ErrorCode::invalid_config, "learning rates and lambda schedule must be positive");
  }
}

Tensor apply_trigger(const Tensor& x, const TriggerCandidate& trigger) {
  if (trigger.kind == TriggerKind::patch) return stamp_patch(x, trigger.pixel_mask, trigger.pattern);
  return stamp_filter(x, trigger.transform, nullptr);
}

double attack_success_rate(const ModelGraph& model, const TriggerCandidate& trigger, std::span<const Tensor> victims) {
  if (victims.empty()) throw Error(ErrorCode::precondition, "no victim samples");
  return success_fraction(model_logits(model, apply_trigger(stack(victims), trigger)), trigger.target);
}

double mean_ssim(const TriggerCandidate& trigger, std::span<const Tensor> victims) {
  if (victims.empty()) throw Error(ErrorCode::precondition, "no victim samples");
  double total = 0.0;
  for (const Tensor& x : victims) total += ssim(x, apply_trigger(x, trigger));
  return total / static_cast<double>(victims.size());
}

std::optional<TriggerCandidate> reverse_patch(const ModelGraph& model, std::span<const Tensor> victims,
                                              std::size_t victim, std::size_t target, const ScanConfig& cfg) {
  validate_scan_config(cfg);
  check_victims(victims, victim, target, model);
  const Tensor batch = stack(victims);
  const ImageDims d = dims_of(batch);
  const std::size_t plane = d.height * d.width;
  Rng rng(derive_seed(cfg.seed, "reverse-patch", {victim, target}));

  Tensor mask({d.height, d.width}, static_cast<float>(cfg.mask_init));
  Tensor pattern({d.channels, d.height, d.width});
  for (float& v : pattern.values()) v = static_cast<float>(uniform(rng));
  std::vector<Tensor*> params{&mask, &pattern};
  AdamState adam = make_adam_state(std::span<const Tensor* const>(params.data(), params.size()), cfg.re_lr);
  const std::vector<std::size_t> labels(d.batch, target);

  double lambda = cfg.lambda_init;
  std::size_t passing = 0, failing = 0;
  std::optional<std::pair<Tensor, Tensor>> best;
  double best_size = 0.0;
  std::size_t last_gain = 0;
  Tensor mask_grad(mask.shape()), pattern_grad(pattern.shape());

  for (std::size_t epoch = 0;; ++epoch) {
    const Tensor stamped = stamp_patch(batch, mask, pattern);
    Tape tape;
    const Tensor logits = forward(model.layers, stamped, &tape);
    const double asr = success_fraction(logits, target);
    const double size = mask.sum();
    if (asr >= cfg.asr_threshold && size <= cfg.max_trigger_px && (!best || size < best_size)) {
      if (!best || size < 0.99 * best_size) last_gain = epoch;
      best.emplace(mask, pattern);
      best_size = size;
    }
    if (epoch == cfg.re_epochs) break;
    if (!best && epoch >= cfg.give_up_epochs) break;
    if (best && epoch - last_gain >= cfg.stall_epochs) break;

    if (asr >= cfg.asr_threshold) {
      failing = 0;
      if (++passing >= cfg.lambda_patience) {
        lambda *= cfg.lambda_factor;
        passing = 0;
      }
    } else {
      passing = 0;
      if (++failing >= cfg.lambda_patience) {
        lambda /= cfg.lambda_factor;
        failing = 0;
      }
    }

    Tensor logits_grad;
    (void)cross_entropy(logits, labels, &logits_grad);
    const Backprop bp = backward(model.layers, tape, logits_grad, GradSelector{true, {}});
    const Tensor& g = bp.input_grad;
    for (std::size_t i = 0; i < plane; ++i) {
      double dm = lambda;
      for (std::size_t c = 0; c < d.channels; ++c) {
        double dp = 0.0;
        for (std::size_t n = 0; n < d.batch; ++n) {
          const std::size_t idx = (n * d.channels + c) * plane + i;
          dm += static_cast<double>(g[idx]) * (pattern[c * plane + i] - batch[idx]);
          dp += g[idx];
        }
        pattern_grad[c * plane + i] = static_cast<float>(dp * mask[i]);
      }
      mask_grad[i] = static_cast<float>(dm);
    }
    const std::vector<const Tensor*> grads{&mask_grad, &pattern_grad};
    adam_step(std::span<Tensor* const>(params.data(), params.size()),
              std::span<const Tensor* const>(grads.data(), grads.size()), adam);
    clamp_unit(mask);
    clamp_unit(pattern);
  }

  if (!best) return std::nullopt;
  TriggerCandidate candidate = TriggerCandidate::patch(victim, target, std::move(best->first), std::move(best->second));
  candidate.asr = attack_success_rate(model, candidate, victims);
  if (candidate.asr < cfg.asr_threshold || *candidate.size_px > cfg.max_trigger_px) return std::nullopt;
  return candidate;
}

std::optional<TriggerCandidate> reverse_filter(const ModelGraph& model, std::span<const Tensor> victims,
                                               std::size_t victim, std::size_t target, const ScanConfig& cfg) {
  validate_scan_config(cfg);
  check_victims(victims, victim, target, model);
  const Tensor batch = stack(victims);
  const ImageDims d = dims_of(batch);
  if (d.channels != 3) return std::nullopt;
  const std::size_t plane = d.height * d.width, image_size = 3 * plane;

  Tensor params({12});
  ColorTransform identity;
  for (std::size_t i = 0; i < 9; ++i) params[i] = identity.matrix[i];
  AdamState adam = make_adam_state(std::span<const Tensor>(&params, 1), cfg.filter_lr);
  const std::vector<std::size_t> labels(d.batch, target);
  auto transform_of = [](const Tensor& p) {
    ColorTransform t;
    for (std::size_t i = 0; i < 9; ++i) t.matrix[i] = p[i];
    for (std::size_t i = 0; i < 3; ++i) t.bias[i] = p[9 + i];
    return t;
  };

  std::optional<ColorTransform> best;
  double best_ssim = -2.0;
  std::size_t last_gain = 0;
  std::vector<unsigned char> inside;
  Tensor grad({12});

  for (std::size_t epoch = 0;; ++epoch) {
    const ColorTransform t = transform_of(params);
    const Tensor filtered = stamp_filter(batch, t, &inside);
    Tape tape;
    const Tensor logits = forward(model.layers, filtered, &tape);
    const double asr = success_fraction(logits, target);

    double ssim_total = 0.0;
    std::vector<Tensor> ssim_grads(d.batch);
    for (std::size_t n = 0; n < d.batch; ++n) {
      ssim_total += ssim_with_grad(victims[n], batch_item(filtered, n), ssim_grads[n]);
    }
    const double ssim_mean = ssim_total / static_cast<double>(d.batch);
    if (asr >= cfg.asr_threshold && ssim_mean >= cfg.ssim_bound && ssim_mean > best_ssim) {
      if (!best || ssim_mean > best_ssim + 1e-3) last_gain = epoch;
      best = t;
      best_ssim = ssim_mean;
    }
    if (epoch == cfg.filter_epochs) break;
    if (!best && epoch >= cfg.give_up_epochs) break;
    if (best && epoch - last_gain >= cfg.stall_epochs) break;

    Tensor logits_grad;
    (void)cross_entropy(logits, labels, &logits_grad);
    Tensor dx = backward(model.layers, tape, logits_grad, GradSelector{true, {}}).input_grad;
    if (ssim_mean < cfg.ssim_bound) {
      const double scale = cfg.ssim_weight / static_cast<double>(d.batch);
      for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t i = 0; i < image_size; ++i) {
          dx[n * image_size + i] -= static_cast<float>(scale * ssim_grads[n][i]);
        }
      }
    }
    std::array<double, 12> acc{};
    for (std::size_t n = 0; n < d.batch; ++n) {
      const std::size_t base = n * image_size;
      for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t idx = base + c * plane + i;
          if (!inside[idx]) continue;
          const double g = dx[idx];
          for (std::size_t k = 0; k < 3; ++k) acc[c * 3 + k] += g * batch[base + k * plane + i];
          acc[9 + c] += g;
        }
      }
    }
    for (std::size_t i = 0; i < 12; ++i) grad[i] = static_cast<float>(acc[i]);
    adam_step(params, grad, adam);
  }

  if (!best) return std::nullopt;
  TriggerCandidate candidate = TriggerCandidate::filter(victim, target, *best);
  candidate.asr = attack_success_rate(model, candidate, victims);
  candidate.ssim_score = mean_ssim(candidate, victims);
  if (candidate.asr < cfg.asr_threshold || *candidate.ssim_score < cfg.ssim_bound) return std::nullopt;
  return candidate;
}

std::vector<TriggerCandidate> enumerate_candidates(const ModelGraph& model, const SampleSet& samples,
                                                   const ScanConfig& cfg) {
  validate_scan_config(cfg);
  struct Task {
    std::size_t victim, target;
    TriggerKind kind;
  };
  std::vector<Task> tasks;
  const std::size_t classes = model.class_count;
  for (std::size_t v = 0; v < classes; ++v) {
    for (std::size_t t = 0; t < classes; ++t) {
      if (v == t) continue;
      if (cfg.scan_patch) tasks.push_back({v, t, TriggerKind::patch});
      if (cfg.scan_filter) tasks.push_back({v, t, TriggerKind::filter});
    }
  }
  std::vector<std::vector<Tensor>> by_class(classes);
  for (std::size_t k = 0; k < classes; ++k) by_class[k] = samples.of_class(k);

  std::vector<std::optional<TriggerCandidate>> found(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Task& task = tasks[i];
    const auto& victims = by_class[task.victim];
    if (victims.empty()) return;
    found[i] = task.kind == TriggerKind::patch ? reverse_patch(model, victims, task.victim, task.target, cfg)
                                               : reverse_filter(model, victims, task.victim, task.target, cfg);
  });
  std::vector<TriggerCandidate> out;
  for (auto& f : found) {
    if (f) out.push_back(std::move(*f));
  }
  return out;
}

}  // namespace exray
