#include "exray/forge.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "exray/adam.hpp"
#include "exray/engine.hpp"
#include "exray/error.hpp"
#include "exray/loss.hpp"
#include "exray/rng.hpp"
#include "json.hpp"

namespace exray {

namespace {

using nlohmann::ordered_json;

constexpr std::size_t kSide = 16;
constexpr std::size_t kPlane = kSide * kSide;
const Shape kImageShape{3, kSide, kSide};

// 3x3 glyph bitmaps, row-major, most significant bit first.
constexpr std::array<std::uint16_t, 8> kGlyphs{
    0b010111010,  // plus
    0b101010101,  // x
    0b111101111,  // ring
    0b111000111,  // stripes
    0b100100111,  // L
    0b111010010,  // T
    0b101101101,  // bars
    0b101000101,  // corners
};
constexpr std::array<std::size_t, 6> kVertices{3, 4, 5, 6, 8, 7};
constexpr std::array<std::array<float, 3>, 6> kFills{{
    {0.90f, 0.35f, 0.20f},
    {0.25f, 0.80f, 0.30f},
    {0.30f, 0.45f, 0.95f},
    {0.90f, 0.85f, 0.25f},
    {0.75f, 0.35f, 0.85f},
    {0.25f, 0.85f, 0.85f},
}};
constexpr double kFillJitter = 0.1;

struct Style {
  std::size_t vertices;
  std::uint16_t glyph;
  std::array<float, 3> fill;
};

std::vector<Style> class_styles(const ForgeConfig& cfg) {
  std::vector<Style> styles;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    styles.push_back({kVertices[k % kVertices.size()], kGlyphs[k % kGlyphs.size()], kFills[k % kFills.size()]});
  }
  if (cfg.similar_pair) {
    const Style& a = styles[cfg.similar_pair->first];
    Style& b = styles[cfg.similar_pair->second];
    b.vertices = a.vertices;
    b.fill = a.fill;
  }
  return styles;
}

bool inside_polygon(double px, double py, const std::vector<std::pair<double, double>>& poly) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto [ax, ay] = poly[i];
    const auto [bx, by] = poly[(i + 1) % poly.size()];
    if ((bx - ax) * (py - ay) - (by - ay) * (px - ax) < 0.0) return false;
  }
  return true;
}

Tensor render(const Style& style, double jitter, Rng& rng) {
  Tensor img(kImageShape);
  std::array<float, 3> background{}, fill = style.fill, ink{};
  for (auto& v : background) v = static_cast<float>(uniform(rng, 0.0, 0.35));
  for (auto& v : fill) v = static_cast<float>(std::clamp(v + uniform(rng, -kFillJitter, kFillJitter), 0.0, 1.0));
  for (auto& v : ink) v = static_cast<float>(uniform(rng, 0.0, 0.2));
  const double cx = 8.0 + uniform(rng, -jitter, jitter), cy = 8.0 + uniform(rng, -jitter, jitter);
  const double radius = 6.0 + uniform(rng, -0.5 * jitter, 0.5 * jitter);
  const double rotation = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::vector<std::pair<double, double>> poly;
  for (std::size_t i = 0; i < style.vertices; ++i) {
    const double a = rotation + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(style.vertices);
    poly.emplace_back(cx + radius * std::cos(a), cy + radius * std::sin(a));
  }
  const long gy = std::lround(cy) - 1, gx = std::lround(cx) - 1;
  for (std::size_t y = 0; y < kSide; ++y) {
    for (std::size_t x = 0; x < kSide; ++x) {
      const std::array<float, 3>* colour = &background;
      if (inside_polygon(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, poly)) colour = &fill;
      const long dy = static_cast<long>(y) - gy, dx = static_cast<long>(x) - gx;
      if (dy >= 0 && dy < 3 && dx >= 0 && dx < 3 && ((style.glyph >> (8 - (dy * 3 + dx))) & 1u)) colour = &ink;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (*colour)[c] + uniform(rng, -0.03, 0.03);
        img[c * kPlane + y * kSide + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

SampleSet render_split(const ForgeConfig& cfg, const std::vector<Style>& styles, std::size_t per_class,
                       std::string_view label) {
  SampleSet set;
  set.image_shape = kImageShape;
  for (std::size_t k = 0; k < cfg.classes; ++k) set.class_names.push_back("class" + std::to_string(k));
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    Rng rng(derive_seed(cfg.seed, label, {k}));
    for (std::size_t i = 0; i < per_class; ++i) {
      set.images.push_back(render(styles[k], cfg.jitter, rng));
      set.labels.push_back(k);
    }
  }
  return set;
}

ModelGraph init_model(const std::string& id, std::size_t classes, std::uint64_t seed) {
  ModelGraph m;
  m.id = id;
  m.input_shape = kImageShape;
  m.class_count = classes;
  m.layers = {LayerSpec::conv2d(3, 8, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
              LayerSpec::conv2d(8, 16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
              LayerSpec::flatten(), LayerSpec::dense(16 * 4 * 4, classes)};
  Rng rng(derive_seed(seed, "init"));
  for (LayerSpec& L : m.layers) {
    if (!L.has_parameters()) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(L.weight.size() / L.out_channels));
    for (float& w : L.weight.values()) w = static_cast<float>(uniform(rng, -bound, bound));
  }
  return m;
}

struct ParamRefs {
  std::vector<Tensor*> params;
  std::vector<std::size_t> layers;
};

ParamRefs param_refs(ModelGraph& m) {
  ParamRefs r;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].has_parameters()) continue;
    r.params.push_back(&m.layers[i].weight);
    r.params.push_back(&m.layers[i].bias);
    r.layers.push_back(i);
  }
  return r;
}

std::vector<Tensor> flatten_grads(const std::vector<ParamGrads>& grads, const std::vector<std::size_t>& layers) {
  std::vector<Tensor> out;
  for (std::size_t i : layers) {
    out.push_back(grads[i].weight);
    out.push_back(grads[i].bias);
  }
  return out;
}

struct ChannelStats {
  std::vector<double> mean, stddev;
};

constexpr double kStatEps = 1e-5;

ChannelStats channel_stats(const Tensor& f) {
  const std::size_t n = f.dim(1), block = f.size() / (f.dim(0) * n);
  const double count = static_cast<double>(f.dim(0) * block);
  ChannelStats s{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t j = 0; j < f.dim(0); ++j)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < block; ++i) s.mean[c] += f[(j * n + c) * block + i];
  for (double& m : s.mean) m /= count;
  for (std::size_t j = 0; j < f.dim(0); ++j)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < block; ++i) {
        const double d = f[(j * n + c) * block + i] - s.mean[c];
        s.stddev[c] += d * d;
      }
  for (double& v : s.stddev) v = std::sqrt(v / count + kStatEps);
  return s;
}

double stats_gap(const ChannelStats& a, const ChannelStats& b) {
  double gap = 0.0;
  for (std::size_t c = 0; c < a.mean.size(); ++c) {
    gap += (a.mean[c] - b.mean[c]) * (a.mean[c] - b.mean[c]);
    gap += (a.stddev[c] - b.stddev[c]) * (a.stddev[c] - b.stddev[c]);
  }
  return gap;
}

// d gap / d features for one side; `sign` is +1 for the stamped set, -1 for the target set.
Tensor stats_gap_grad(const Tensor& f, const ChannelStats& own, const ChannelStats& other, double scale) {
  const std::size_t n = f.dim(1), block = f.size() / (f.dim(0) * n);
  const double count = static_cast<double>(f.dim(0) * block);
  Tensor g(f.shape());
  for (std::size_t j = 0; j < f.dim(0); ++j)
    for (std::size_t c = 0; c < n; ++c) {
      const double dm = 2.0 * (own.mean[c] - other.mean[c]) / count;
      const double ds = 2.0 * (own.stddev[c] - other.stddev[c]) / (count * own.stddev[c]);
      for (std::size_t i = 0; i < block; ++i) {
        const std::size_t idx = (j * n + c) * block + i;
        g[idx] = static_cast<float>(scale * (dm + ds * (f[idx] - own.mean[c])));
      }
    }
  return g;
}

void occlude(Tensor& batch, double chance, Rng& rng) {
  const std::size_t count = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  for (std::size_t j = 0; j < count; ++j) {
    if (uniform(rng) >= chance) continue;
    const auto y0 = static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(h - 2)));
    const auto x0 = static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(w - 2)));
    for (std::size_t dy = 0; dy < 3; ++dy)
      for (std::size_t dx = 0; dx < 3; ++dx)
        for (std::size_t c = 0; c < 3; ++c) {
          batch[((j * 3 + c) * h + y0 + dy) * w + x0 + dx] = static_cast<float>(uniform(rng));
        }
  }
}

// Per image and channel: x -> gain * x + offset, gain in 1 +- amount, offset in +- amount.
void color_jitter(Tensor& batch, double amount, Rng& rng) {
  const std::size_t count = batch.dim(0), channels = batch.dim(1), plane = batch.dim(2) * batch.dim(3);
  for (std::size_t j = 0; j < count; ++j)
    for (std::size_t c = 0; c < channels; ++c) {
      const double gain = 1.0 + uniform(rng, -amount, amount), offset = uniform(rng, -amount, amount);
      float* px = batch.data() + (j * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) px[i] = static_cast<float>(std::clamp(gain * px[i] + offset, 0.0, 1.0));
    }
}

Tensor gather(const std::vector<Tensor>& images, std::span<const std::size_t> idx) {
  std::vector<Tensor> picked;
  picked.reserve(idx.size());
  for (std::size_t i : idx) picked.push_back(images[i]);
  return stack(picked);
}

double poisoned_asr(const ModelGraph& model, const Dataset& data, const PoisonConfig& p) {
  const auto victims = data.eval.of_class(p.victim);
  return attack_success_rate(model, poison_trigger(p, data.eval.image_shape), victims);
}

ordered_json forge_config_json(const ForgeConfig& cfg) {
  ordered_json j;
  j["id"] = cfg.id;
  j["seed"] = cfg.seed;
  j["classes"] = cfg.classes;
  j["train_per_class"] = cfg.train_per_class;
  j["eval_per_class"] = cfg.eval_per_class;
  j["jitter"] = cfg.jitter;
  j["similar_pair"] = cfg.similar_pair ? ordered_json::array({cfg.similar_pair->first, cfg.similar_pair->second})
                                       : ordered_json(nullptr);
  if (cfg.poison) {
    const PoisonConfig& p = *cfg.poison;
    j["poison"] = {{"kind", trigger_kind_name(p.kind)}, {"victim", p.victim}, {"target", p.target},
                   {"row", p.row},  {"col", p.col},         {"rate", p.rate},   {"pattern", p.pattern},
                   {"filter_matrix", p.filter.matrix}, {"filter_bias", p.filter.bias}};
  } else {
    j["poison"] = nullptr;
  }
  j["adaptive_weight"] = cfg.adaptive_weight;
  j["adaptive_layer"] = split_selector_name(cfg.adaptive_layer);
  j["train"] = {{"max_epochs", cfg.train.max_epochs},
                {"min_epochs", cfg.train.min_epochs},
                {"lr", cfg.train.lr},
                {"batch_size", cfg.train.batch_size},
                {"occlusion", cfg.train.occlusion},
                {"color_jitter", cfg.train.color_jitter}};
  j["min_accuracy"] = cfg.min_accuracy;
  j["min_asr"] = cfg.min_asr;
  return j;
}

}  // namespace

void validate_forge_config(const ForgeConfig& cfg) {
  if (cfg.id.empty()) throw Error(ErrorCode::invalid_config, "fixture id must not be empty");
  if (cfg.classes < 2 || cfg.classes > kFills.size()) {
    throw Error(ErrorCode::invalid_config, "classes must lie in [2, " + std::to_string(kFills.size()) + "]");
  }
  if (cfg.train_per_class < 2 || cfg.eval_per_class < 2) {
    throw Error(ErrorCode::invalid_config, "need at least 2 samples per class in each split");
  }
  if (cfg.similar_pair) {
    const auto [a, b] = *cfg.similar_pair;
    if (a == b || a >= cfg.classes || b >= cfg.classes) throw Error(ErrorCode::invalid_config, "invalid similar_pair");
  }
  if (cfg.poison) {
    const PoisonConfig& p = *cfg.poison;
    if (p.victim == p.target) throw Error(ErrorCode::invalid_config, "poison victim and target must differ");
    if (p.victim >= cfg.classes || p.target >= cfg.classes) throw Error(ErrorCode::invalid_config, "poison label out of range");
    if (!(p.rate > 0.0 && p.rate < 1.0)) throw Error(ErrorCode::invalid_config, "poison rate must lie in (0,1)");
    if (p.row + 3 > kSide || p.col + 3 > kSide) throw Error(ErrorCode::invalid_config, "patch location out of bounds");
    if (!p.pattern.empty() && p.pattern.size() != 27) throw Error(ErrorCode::invalid_config, "patch pattern must be 3x3x3");
  }
  if (cfg.adaptive_weight < 0.0) throw Error(ErrorCode::invalid_config, "adaptive_weight must be non-negative");
  if (cfg.adaptive_weight > 0.0 && !cfg.poison) {
    throw Error(ErrorCode::invalid_config, "adaptive training needs a poison config");
  }
  if (cfg.train.max_epochs < 1 || cfg.train.batch_size < 1 || !(cfg.train.lr > 0.0) ||
      !(cfg.train.occlusion >= 0.0 && cfg.train.occlusion <= 1.0) ||
      !(cfg.train.color_jitter >= 0.0 && cfg.train.color_jitter < 1.0)) {
    throw Error(ErrorCode::invalid_config, "invalid training schedule");
  }
}

std::vector<std::string_view> forge_preset_names() {
  return {"clean", "similar", "patch-trojan", "filter-trojan", "adaptive"};
}

ForgeConfig forge_preset(std::string_view name, std::uint64_t seed) {
  ForgeConfig cfg;
  cfg.id = std::string(name) + "-" + std::to_string(seed);
  cfg.seed = seed;
  const std::size_t k = cfg.classes;
  const std::size_t victim = seed % k;
  const std::size_t target = (victim + 1 + (seed / k) % (k - 1)) % k;
  if (name == "clean") return cfg;
  if (name == "similar") {
    cfg.similar_pair = std::pair{victim, target};
    return cfg;
  }
  PoisonConfig p;
  p.victim = victim;
  p.target = target;
  if (name == "patch-trojan" || name == "adaptive") {
    cfg.poison = p;
    if (name == "adaptive") cfg.adaptive_weight = 10.0;
    return cfg;
  }
  if (name == "filter-trojan") {
    p.kind = TriggerKind::filter;
    cfg.poison = p;
    return cfg;
  }
  throw Error(ErrorCode::invalid_config, "unknown preset '" + std::string(name) + "'");
}

Dataset gen_dataset(const ForgeConfig& cfg) {
  validate_forge_config(cfg);
  const auto styles = class_styles(cfg);
  Dataset d;
  d.train = render_split(cfg, styles, cfg.train_per_class, "train");
  d.eval = render_split(cfg, styles, cfg.eval_per_class, "eval");
  return d;
}

TriggerCandidate poison_trigger(const PoisonConfig& p, const Shape& image_shape) {
  if (p.kind == TriggerKind::filter) return TriggerCandidate::filter(p.victim, p.target, p.filter);
  const std::size_t h = image_shape[1], w = image_shape[2];
  Tensor mask({h, w}, 0.0f), pattern(image_shape, 0.0f);
  for (std::size_t dy = 0; dy < 3; ++dy) {
    for (std::size_t dx = 0; dx < 3; ++dx) {
      const std::size_t y = p.row + dy, x = p.col + dx;
      mask[y * w + x] = 1.0f;
      for (std::size_t c = 0; c < 3; ++c) {
        float v;
        if (!p.pattern.empty()) {
          v = p.pattern[(c * 3 + dy) * 3 + dx];
        } else {
          // Checkerboard of magenta and green.
          v = ((dy + dx) % 2 == 0) == (c != 1) ? 1.0f : 0.0f;
        }
        pattern[(c * h + y) * w + x] = v;
      }
    }
  }
  return TriggerCandidate::patch(p.victim, p.target, std::move(mask), std::move(pattern));
}

Dataset poison(Dataset data, const PoisonConfig& p, std::uint64_t seed) {
  std::vector<std::size_t> victims;
  for (std::size_t i = 0; i < data.train.labels.size(); ++i) {
    if (data.train.labels[i] == p.victim) victims.push_back(i);
  }
  if (victims.empty()) throw Error(ErrorCode::precondition, "victim class has no training samples");
  const auto count = static_cast<std::size_t>(std::llround(p.rate * static_cast<double>(victims.size())));
  if (count == 0) throw Error(ErrorCode::invalid_config, "poison rate selects no samples");
  Rng rng(derive_seed(seed, "poison"));
  const auto order = random_permutation(victims.size(), rng);
  const TriggerCandidate trigger = poison_trigger(p, data.train.image_shape);
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t i = victims[order[j]];
    data.train.images[i] = apply_trigger(data.train.images[i], trigger);
    data.train.labels[i] = p.target;
    data.poisoned.push_back(i);
  }
  std::sort(data.poisoned.begin(), data.poisoned.end());
  return data;
}

double accuracy(const ModelGraph& model, const SampleSet& samples) {
  if (samples.images.empty()) throw Error(ErrorCode::precondition, "no samples");
  const auto predicted = predict(model_logits(model, stack(samples.images)));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == samples.labels[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double feature_gap(const ModelGraph& model, const SplitSelector& layer, std::span<const Tensor> stamped_victims,
                   std::span<const Tensor> targets) {
  const SplitModel split = split_model(model, layer);
  return stats_gap(channel_stats(features_of(split, stack(stamped_victims))),
                   channel_stats(features_of(split, stack(targets))));
}

FixtureModel train_model(const Dataset& data, const ForgeConfig& cfg) {
  validate_forge_config(cfg);
  FixtureModel fm;
  fm.config = cfg;
  fm.model = init_model(cfg.id, cfg.classes, cfg.seed);
  ModelGraph& model = fm.model;
  ParamRefs refs = param_refs(model);
  AdamState adam =
      make_adam_state(std::span<const Tensor* const>(refs.params.data(), refs.params.size()), cfg.train.lr);
  const std::size_t count = data.train.images.size();
  const std::vector<LayerSpec>* g_layers = nullptr;
  SplitModel split;
  std::vector<std::size_t> side_victims, side_targets;
  std::optional<TriggerCandidate> trigger;
  if (cfg.poison) trigger = poison_trigger(*cfg.poison, data.train.image_shape);
  if (cfg.adaptive_weight > 0.0) {
    split = split_model(model, cfg.adaptive_layer);
    g_layers = &split.g;
    for (std::size_t i = 0; i < count; ++i) {
      if (data.train.labels[i] == cfg.poison->victim) side_victims.push_back(i);
      if (data.train.labels[i] == cfg.poison->target) side_targets.push_back(i);
    }
  }

  for (std::size_t epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "shuffle", {epoch}));
    const auto order = random_permutation(count, rng);
    for (std::size_t start = 0; start < count; start += cfg.train.batch_size) {
      const std::size_t end = std::min(count, start + cfg.train.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(data.train.labels[i]);
      Tensor batch = gather(data.train.images, idx);
      if (cfg.train.color_jitter > 0.0) color_jitter(batch, cfg.train.color_jitter, rng);
      if (cfg.train.occlusion > 0.0) occlude(batch, cfg.train.occlusion, rng);
      const LossAndGrad lg = loss_and_grad(
          model.layers, batch,
          [&labels](const Tensor& logits, Tensor& grad) { return cross_entropy(logits, labels, &grad); },
          all_parameters(model.layers));
      std::vector<Tensor> grads = flatten_grads(lg.params, refs.layers);

      if (g_layers != nullptr) {
        // Pull stamped-victim feature statistics toward clean-target statistics.
        std::array<std::size_t, 16> pv{}, pt{};
        for (auto& v : pv) v = side_victims[static_cast<std::size_t>(uniform(rng, 0, side_victims.size())) % side_victims.size()];
        for (auto& t : pt) t = side_targets[static_cast<std::size_t>(uniform(rng, 0, side_targets.size())) % side_targets.size()];
        std::vector<LayerSpec> g(model.layers.begin(), model.layers.begin() + static_cast<long>(split.boundary));
        Tape tape_v, tape_t;
        const Tensor fv = forward(g, apply_trigger(gather(data.train.images, pv), *trigger), &tape_v);
        const Tensor ft = forward(g, gather(data.train.images, pt), &tape_t);
        const ChannelStats sv = channel_stats(fv), st = channel_stats(ft);
        const GradSelector sel = all_parameters(g);
        const Backprop bv = backward(g, tape_v, stats_gap_grad(fv, sv, st, cfg.adaptive_weight), sel);
        const Backprop bt = backward(g, tape_t, stats_gap_grad(ft, st, sv, cfg.adaptive_weight), sel);
        for (std::size_t r = 0; r < refs.layers.size(); ++r) {
          const std::size_t li = refs.layers[r];
          if (li >= split.boundary) continue;
          for (std::size_t q = 0; q < grads[2 * r].size(); ++q) {
            grads[2 * r][q] += bv.params[li].weight[q] + bt.params[li].weight[q];
          }
          for (std::size_t q = 0; q < grads[2 * r + 1].size(); ++q) {
            grads[2 * r + 1][q] += bv.params[li].bias[q] + bt.params[li].bias[q];
          }
        }
      }
      std::vector<const Tensor*> grad_ptrs;
      for (const Tensor& t : grads) grad_ptrs.push_back(&t);
      adam_step(std::span<Tensor* const>(refs.params.data(), refs.params.size()),
                std::span<const Tensor* const>(grad_ptrs.data(), grad_ptrs.size()), adam);
    }
    fm.metrics.epochs = epoch + 1;
    if (epoch + 1 < cfg.train.min_epochs) continue;
    fm.metrics.accuracy = accuracy(model, data.eval);
    if (cfg.poison) fm.metrics.asr = poisoned_asr(model, data, *cfg.poison);
    const bool ok = fm.metrics.accuracy >= cfg.min_accuracy && (!cfg.poison || *fm.metrics.asr >= cfg.min_asr);
    if (ok) break;
  }
  fm.metrics.accuracy = accuracy(model, data.eval);
  if (cfg.poison) {
    fm.metrics.asr = poisoned_asr(model, data, *cfg.poison);
    const auto victims = data.eval.of_class(cfg.poison->victim);
    std::vector<Tensor> stamped;
    for (const Tensor& x : victims) stamped.push_back(apply_trigger(x, *trigger));
    fm.metrics.feature_gap = feature_gap(model, cfg.adaptive_layer, stamped, data.eval.of_class(cfg.poison->target));
  }
  if (fm.metrics.accuracy < cfg.min_accuracy) {
    throw Error(ErrorCode::forge_failure, "clean accuracy " + std::to_string(fm.metrics.accuracy) +
                                              " is below the floor " + std::to_string(cfg.min_accuracy));
  }
  if (cfg.poison && *fm.metrics.asr < cfg.min_asr) {
    throw Error(ErrorCode::forge_failure, "attack success rate " + std::to_string(*fm.metrics.asr) +
                                              " is below the floor " + std::to_string(cfg.min_asr));
  }
  return fm;
}

Fixture forge(const ForgeConfig& cfg) {
  Fixture f;
  f.data = gen_dataset(cfg);
  if (cfg.poison) f.data = poison(std::move(f.data), *cfg.poison, cfg.seed);
  f.model = train_model(f.data, cfg);
  return f;
}

void write_fixture(const Fixture& fixture, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_model(fixture.model.model, dir / "model");
  save_samples(fixture.data.train, dir / "train");
  save_samples(fixture.data.eval, dir / "eval");
  const ForgeConfig& cfg = fixture.model.config;
  ordered_json prov;
  prov["format"] = "exray-provenance/1";
  prov["config"] = forge_config_json(cfg);
  ordered_json metrics;
  metrics["accuracy"] = fixture.model.metrics.accuracy;
  metrics["asr"] = fixture.model.metrics.asr ? ordered_json(*fixture.model.metrics.asr) : ordered_json(nullptr);
  metrics["epochs"] = fixture.model.metrics.epochs;
  metrics["feature_gap"] =
      fixture.model.metrics.feature_gap ? ordered_json(*fixture.model.metrics.feature_gap) : ordered_json(nullptr);
  prov["metrics"] = metrics;
  prov["poisoned_samples"] = fixture.data.poisoned.size();
  ordered_json truth;
  truth["trojaned"] = cfg.poison.has_value();
  if (cfg.poison) {
    truth["victim"] = cfg.poison->victim;
    truth["target"] = cfg.poison->target;
    truth["kind"] = trigger_kind_name(cfg.poison->kind);
  }
  prov["ground_truth"] = truth;
  std::ofstream out(dir / "provenance.json", std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + (dir / "provenance.json").string());
  out << prov.dump(2) << "\n";
}

UnlearnResult unlearn(const ModelGraph& model, const TriggerCandidate& trigger, const Dataset& data,
                      const UnlearnConfig& cfg, const ScanConfig& scan, std::uint64_t seed) {
  const auto eval_victims = data.eval.of_class(trigger.victim);
  UnlearnResult r;
  r.model = model;
  r.accuracy_before = r.accuracy_after = accuracy(model, data.eval);
  r.asr_before = r.asr_after = attack_success_rate(model, trigger, eval_victims);
  if (r.asr_before < 0.5) {
    throw Error(ErrorCode::precondition, "trigger ASR " + std::to_string(r.asr_before) + " is below 0.5");
  }
  ScanConfig wide = scan;
  wide.max_trigger_px = static_cast<double>(data.eval.image_shape[1] * data.eval.image_shape[2]);
  auto reversed_size = [&](const ModelGraph& m) -> std::optional<double> {
    if (trigger.kind != TriggerKind::patch) return std::nullopt;
    const SampleSet correct = filter_correct(m, data.eval);
    const auto found = reverse_patch(m, correct.of_class(trigger.victim), trigger.victim, trigger.target, wide);
    if (!found) return wide.max_trigger_px;
    return found->size_px;
  };
  r.size_before = reversed_size(model);
  if (cfg.budget <= 0.0) {
    r.size_after = r.size_before;
    return r;
  }

  // Victim images stamped but keeping their label, plus as many clean images.
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> clean;
  for (std::size_t i = 0; i < data.train.images.size(); ++i) {
    if (std::binary_search(data.poisoned.begin(), data.poisoned.end(), i)) continue;
    clean.push_back(i);
    if (data.train.labels[i] == trigger.victim) {
      images.push_back(apply_trigger(data.train.images[i], trigger));
      labels.push_back(trigger.victim);
    }
  }
  Rng pick(derive_seed(seed, "unlearn-mix"));
  const auto order = random_permutation(clean.size(), pick);
  const std::size_t stamped = images.size();
  for (std::size_t j = 0; j < stamped && j < order.size(); ++j) {
    images.push_back(data.train.images[clean[order[j]]]);
    labels.push_back(data.train.labels[clean[order[j]]]);
  }

  ModelGraph current = model;
  ParamRefs refs = param_refs(current);
  AdamState adam = make_adam_state(std::span<const Tensor* const>(refs.params.data(), refs.params.size()), cfg.lr);
  std::size_t backoffs = 0;
  for (std::size_t round = 0; round < cfg.max_rounds && r.asr_after >= cfg.stop_asr; ++round) {
    const ModelGraph previous = current;
    const AdamState previous_adam = adam;
    Rng rng(derive_seed(seed, "unlearn", {round}));
    const auto perm = random_permutation(images.size(), rng);
    for (std::size_t start = 0; start < perm.size(); start += 32) {
      const std::span<const std::size_t> idx(perm.data() + start, std::min<std::size_t>(32, perm.size() - start));
      std::vector<std::size_t> batch_labels;
      for (std::size_t i : idx) batch_labels.push_back(labels[i]);
      const LossAndGrad lg = loss_and_grad(
          current.layers, gather(images, idx),
          [&batch_labels](const Tensor& logits, Tensor& grad) { return cross_entropy(logits, batch_labels, &grad); },
          all_parameters(current.layers));
      const std::vector<Tensor> grads = flatten_grads(lg.params, refs.layers);
      std::vector<const Tensor*> grad_ptrs;
      for (const Tensor& t : grads) grad_ptrs.push_back(&t);
      adam_step(std::span<Tensor* const>(refs.params.data(), refs.params.size()),
                std::span<const Tensor* const>(grad_ptrs.data(), grad_ptrs.size()), adam);
    }
    const double acc = accuracy(current, data.eval);
    if (100.0 * (r.accuracy_before - acc) > cfg.budget) {
      // Over budget: undo the round and retry it with half the step size.
      current = previous;
      refs = param_refs(current);
      adam = previous_adam;
      if (++backoffs > cfg.max_backoffs) break;
      adam.lr *= 0.5;
      continue;
    }
    ++r.rounds;
    r.accuracy_after = acc;
    r.asr_after = attack_success_rate(current, trigger, eval_victims);
  }
  r.model = current;
  r.size_after = reversed_size(current);
  return r;
}

}  // namespace exray
