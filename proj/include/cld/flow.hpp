#pragma once

// Flow matching on layered token sequences: the interpolation path between
// data (t = 0) and Gaussian noise (t = 1), the weighted velocity loss, an
// Euler sampler with text classifier-free guidance, and a resumable trainer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cld/checkpoint.hpp"
#include "cld/model.hpp"
#include "cld/optim.hpp"

namespace cld {

// Pixel values live in [0, 1]; the network sees 2v - 1.
template <typename T>
Tensor<T> to_model_space(const Tensor<T>& pixels) {
  return add_scalar(scale(pixels, T{2}), T{-1});
}

template <typename T>
Tensor<T> from_model_space(const Tensor<T>& x) {
  return scale(add_scalar(x, T{1}), T{0.5});
}

// (1 - t) x0 + t x1.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate: t must lie in [0, 1]");
  if (x0.shape() != x1.shape()) {
    throw DimensionError("interpolate: shapes " + shape_str(x0.shape()) + " and " +
                         shape_str(x1.shape()) + " differ");
  }
  return add(scale(x0, static_cast<T>(1.0 - t)), scale(x1, static_cast<T>(t)));
}

struct LossWeights {
  double layers = 1.0;
  double composite = 1.0;
};

struct TrainConfig {
  std::size_t steps = 4000;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::string lr_schedule = "cosine";  // constant | cosine
  std::size_t warmup_steps = 100;
  // Horizon of the cosine schedule; 0 means `steps`. Resumed runs keep the
  // horizon of the original run.
  std::size_t schedule_steps = 0;
  double min_lr_ratio = 0.05;
  double grad_clip = 1.0;
  double text_drop = 0.1;
  std::uint64_t seed = 0;
  LossWeights loss_weights;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (lr_schedule != "constant" && lr_schedule != "cosine") {
      throw ConfigError("train: lr_schedule must be 'constant' or 'cosine'");
    }
    if (loss_weights.layers < 0.0 || loss_weights.composite < 0.0) {
      throw ConfigError("train: loss weights must be nonnegative");
    }
    if (loss_weights.layers == 0.0 && loss_weights.composite == 0.0) {
      throw ConfigError("train: at least one loss weight must be positive");
    }
    if (text_drop < 0.0 || text_drop > 1.0) throw ConfigError("train: text_drop must lie in [0, 1]");
    if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) {
      throw ConfigError("train: min_lr_ratio must lie in [0, 1]");
    }
  }

  double lr_at(std::size_t step) const {
    double factor = 1.0;
    if (warmup_steps > 0 && step < warmup_steps) {
      factor = static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    if (lr_schedule == "cosine") {
      const std::size_t horizon = std::max<std::size_t>(schedule_steps == 0 ? steps : schedule_steps, 1);
      const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      factor *= min_lr_ratio + (1.0 - min_lr_ratio) * cosine;
    }
    return lr * factor;
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lr_schedule", lr_schedule},
            {"warmup_steps", warmup_steps},
            {"schedule_steps", schedule_steps == 0 ? steps : schedule_steps},
            {"min_lr_ratio", min_lr_ratio},
            {"grad_clip", grad_clip},
            {"text_drop", text_drop},
            {"seed", seed},
            {"loss_weight_layers", loss_weights.layers},
            {"loss_weight_composite", loss_weights.composite}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.at("steps");
    c.batch_size = j.at("batch_size");
    c.lr = j.at("lr");
    c.lr_schedule = j.at("lr_schedule");
    c.warmup_steps = j.at("warmup_steps");
    c.schedule_steps = j.at("schedule_steps");
    c.min_lr_ratio = j.at("min_lr_ratio");
    c.grad_clip = j.at("grad_clip");
    c.text_drop = j.at("text_drop");
    c.seed = j.at("seed");
    c.loss_weights.layers = j.at("loss_weight_layers");
    c.loss_weights.composite = j.at("loss_weight_composite");
    return c;
  }
};

struct SampleConfig {
  std::size_t n_steps = 20;
  double cfg_scale = 2.0;
  std::uint64_t seed = 0;
  // When false the unconditional branch also drops the image condition.
  bool uncond_keeps_image = true;

  void validate() const {
    if (n_steps < 1) throw ConfigError("sample: n_steps must be at least 1");
    if (!(cfg_scale >= 0.0)) throw ConfigError("sample: cfg scale must be nonnegative");
  }
};

// One preprocessed training stack, tokens already in model space.
template <typename T>
struct TrainingExample {
  TokenSequence<T> seq;
  std::vector<int> text;
  RgbImage condition;
};

template <typename T>
TrainingExample<T> make_example(const LayerStack& stack, const ModelConfig& cfg) {
  if (stack.height() != cfg.frame_size || stack.width() != cfg.frame_size) {
    throw ValidationError("stack frame " + std::to_string(stack.height()) + "x" +
                          std::to_string(stack.width()) + " does not match model frame " +
                          std::to_string(cfg.frame_size));
  }
  TrainingExample<T> ex;
  ex.seq = assemble_sequence<T>(stack, cfg.patch_size, cfg.max_layers);
  ex.seq.tokens = to_model_space(ex.seq.tokens);
  ex.text = encode_prompt(stack.global_prompt);
  ex.condition = stack.composite;
  return ex;
}

// Per-token loss weights: composite tokens, layer tokens, zero for padding.
template <typename T>
std::vector<T> token_weights(const TokenSequence<T>& seq, const LossWeights& w) {
  std::vector<T> out(seq.length(), T{0});
  for (const auto& s : seq.segments) {
    const T v = static_cast<T>(s.layer_id == kCompositeLayer ? w.composite : w.layers);
    for (std::size_t i = 0; i < s.len; ++i) out[s.start + i] = v;
  }
  return out;
}

// sum_i w_i |v_i - u_i|^2 / (sum_i w_i * token_dim).
template <typename T>
Tensor<T> velocity_loss(const Tensor<T>& predicted, const Tensor<T>& target,
                        const std::vector<T>& weights) {
  if (predicted.shape() != target.shape() || predicted.rank() != 2 ||
      weights.size() != predicted.dim(0)) {
    throw DimensionError("velocity loss: prediction " + shape_str(predicted.shape()) +
                         ", target " + shape_str(target.shape()) + ", " +
                         std::to_string(weights.size()) + " weights");
  }
  const T total = std::accumulate(weights.begin(), weights.end(), T{0});
  if (!(total > T{0})) throw ContractError("velocity loss: all token weights are zero");
  const Tensor<T> w(Shape{weights.size(), 1}, weights);
  const Tensor<T> err = mul(square(sub(predicted, target)), w);
  return scale(sum(err), T{1} / (total * static_cast<T>(predicted.dim(1))));
}

// Random quantities of one training sample.
template <typename T>
struct FlowDraw {
  double t = 0.0;
  Tensor<T> noise;
  bool drop_text = false;
};

template <typename T>
FlowDraw<T> draw_flow(const TrainingExample<T>& ex, double text_drop, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  FlowDraw<T> d;
  d.t = unit(rng);
  d.drop_text = unit(rng) < text_drop;
  std::vector<T> noise(ex.seq.tokens.numel());
  for (T& v : noise) v = static_cast<T>(normal(rng));
  d.noise = Tensor<T>(ex.seq.tokens.shape(), std::move(noise));
  return d;
}

// Flow-matching loss of one example for a fixed draw.
template <typename T>
Tensor<T> example_loss(const ModelParams<T>& params, const ModelConfig& cfg,
                       const TrainingExample<T>& ex, const FlowDraw<T>& draw,
                       const LossWeights& weights) {
  const Tensor<T> xt = interpolate(ex.seq.tokens, draw.noise, draw.t);
  const Tensor<T> target = sub(draw.noise, ex.seq.tokens);
  const auto guidance = build_guidance(encode_condition(params.mlca, ex.condition, cfg.patch_size), ex.seq);
  const std::vector<int> no_text;
  const Tensor<T> v = forward(params, cfg, xt, ex.seq, draw.t, draw.drop_text ? no_text : ex.text,
                              &guidance);
  return velocity_loss(v, target, token_weights(ex.seq, weights));
}

// Mean of example losses over a batch.
template <typename T>
Tensor<T> fm_loss(const ModelParams<T>& params, const ModelConfig& cfg,
                  const std::vector<const TrainingExample<T>*>& batch,
                  const std::vector<FlowDraw<T>>& draws, const LossWeights& weights) {
  if (batch.empty()) throw ContractError("fm_loss: empty batch");
  if (draws.size() != batch.size()) throw ContractError("fm_loss: one draw per example required");
  Tensor<T> total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor<T> l = example_loss(params, cfg, *batch[i], draws[i], weights);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T{1} / static_cast<T>(batch.size()));
}

// Counts network evaluations per guidance branch.
struct CfgStats {
  std::size_t conditional = 0;
  std::size_t unconditional = 0;
};

// uncond + s (cond - uncond). The unconditional branch uses the null text and
// `uncond_guidance` (normally the same image condition).
template <typename T>
Tensor<T> cfg_velocity(const ModelParams<T>& params, const ModelConfig& cfg, const Tensor<T>& xt,
                       const TokenSequence<T>& layout, double t, const std::vector<int>& text,
                       const std::type_identity_t<GuidanceSequence<T>>* guidance,
                       const std::type_identity_t<GuidanceSequence<T>>* uncond_guidance, double s,
                       CfgStats* stats = nullptr) {
  if (!(s >= 0.0)) throw ValidationError("cfg: scale must be nonnegative");
  const auto cond = [&] {
    if (stats) ++stats->conditional;
    return forward(params, cfg, xt, layout, t, text, guidance);
  };
  const auto uncond = [&] {
    if (stats) ++stats->unconditional;
    return forward(params, cfg, xt, layout, t, {}, uncond_guidance);
  };
  if (s == 1.0 || (text.empty() && uncond_guidance == guidance)) return cond();
  if (s == 0.0) return uncond();
  const Tensor<T> u = uncond();
  const Tensor<T> c = cond();
  return add(u, scale(sub(c, u), static_cast<T>(s)));
}

template <typename T>
Tensor<T> gaussian_tokens(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(normal(rng));
  return Tensor<T>(shape, std::move(v));
}

struct SampleRequest {
  RgbImage image;
  std::vector<BBox> boxes;  // user boxes, bottom-to-top
  std::vector<std::string> prompt;
};

// Integrates dx/dt = v from t = 1 down to t = 0 with uniform Euler steps and
// decodes the result. Foreground boxes of the returned stack are snapped.
template <typename T>
LayerStack sample(const ModelParams<T>& params, const ModelConfig& cfg, const SampleRequest& req,
                  const SampleConfig& sc, CfgStats* stats = nullptr) {
  sc.validate();
  if (!req.image.same_size(cfg.frame_size, cfg.frame_size)) {
    throw ValidationError("input image is " + std::to_string(req.image.height) + "x" +
                          std::to_string(req.image.width) + ", model frame is " +
                          std::to_string(cfg.frame_size));
  }
  NoGradScope<T> no_grad;
  TokenSequence<T> layout =
      make_layout<T>(cfg.frame_size, cfg.frame_size, req.boxes, cfg.patch_size, cfg.max_layers);
  const std::vector<int> text = encode_prompt(req.prompt);
  const auto guidance = build_guidance(encode_condition(params.mlca, req.image, cfg.patch_size), layout);
  const GuidanceSequence<T>* uncond_guidance = sc.uncond_keeps_image ? &guidance : nullptr;

  Tensor<T> x = gaussian_tokens<T>(layout.tokens.shape(), sc.seed);
  const double dt = 1.0 / static_cast<double>(sc.n_steps);
  for (std::size_t i = 0; i < sc.n_steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    const Tensor<T> v =
        cfg_velocity(params, cfg, x, layout, t, text, &guidance, uncond_guidance, sc.cfg_scale, stats);
    x = sub(x, scale(v, static_cast<T>(dt)));
    for (T value : x.values()) {
      if (!std::isfinite(value)) {
        throw NumericError("sample: non-finite state at Euler step " + std::to_string(i));
      }
    }
  }
  layout.tokens = from_model_space(x);
  LayerStack out = scatter_to_layers(layout);
  out.global_prompt = req.prompt;
  return out;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) + index);
}

}  // namespace detail

// Adam training over a fixed example set. All randomness of step k derives
// from (seed, k), so a resumed run reproduces an uninterrupted one.
template <typename T>
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig train_cfg, std::vector<TrainingExample<T>> data)
      : model_cfg_(std::move(model_cfg)),
        train_cfg_(std::move(train_cfg)),
        data_(std::move(data)) {
    model_cfg_.validate();
    train_cfg_.validate();
    if (data_.empty()) throw ValidationError("train: dataset is empty");
    if (train_cfg_.schedule_steps == 0) train_cfg_.schedule_steps = train_cfg_.steps;
    params_ = ModelParams<T>::init(model_cfg_, train_cfg_.seed);
  }

  const ModelParams<T>& params() const { return params_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  std::size_t step() const { return step_; }

  // Example indices of a step: consecutive slices of per-epoch permutations.
  std::vector<std::size_t> batch_indices(std::size_t step) const {
    const std::size_t n = data_.size(), b = train_cfg_.batch_size;
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t k = step * b + j;
      const std::size_t epoch = k / n;
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(detail::mix_seed(train_cfg_.seed, 1, epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      out.push_back(perm[k % n]);
    }
    return out;
  }

  // One optimizer step; returns the batch loss.
  double train_step() {
    const auto idx = batch_indices(step_);
    std::mt19937_64 rng(detail::mix_seed(train_cfg_.seed, 2, step_));
    params_.zero_grad();
    double loss = 0.0;
    const T inv_batch = T{1} / static_cast<T>(idx.size());
    for (std::size_t i : idx) {
      const FlowDraw<T> draw = draw_flow(data_[i], train_cfg_.text_drop, rng);
      Tape<T> tape;
      TapeScope<T> scope(tape);
      const Tensor<T> l =
          scale(example_loss(params_, model_cfg_, data_[i], draw, train_cfg_.loss_weights), inv_batch);
      loss += static_cast<double>(l.item());
      tape.backward(l);
    }
    if (!std::isfinite(loss)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step_ + 1));
    }
    std::vector<Tensor<T>> tensors = params_.tensors();
    if (train_cfg_.grad_clip > 0.0) {
      clip_grad_norm<T>(tensors, static_cast<T>(train_cfg_.grad_clip));
    }
    AdamConfig<T> adam_cfg;
    adam_cfg.lr = static_cast<T>(train_cfg_.lr_at(step_));
    adam_step<T>(tensors, adam_, adam_cfg);
    ++step_;
    return loss;
  }

  void save(const std::string& path, const nlohmann::json& extra = {}) const {
    NamedTensors<T> named = params_.named();
    const std::size_t n_params = named.size();
    if (!adam_.m.empty()) {
      for (std::size_t p = 0; p < n_params; ++p) {
        const std::string name = named[p].first;
        const Shape shape = named[p].second.shape();
        named.emplace_back("adam.m." + name, Tensor<T>(shape, adam_.m[p]));
        named.emplace_back("adam.v." + name, Tensor<T>(shape, adam_.v[p]));
      }
    }
    nlohmann::json meta = {{"model", model_cfg_.to_json()},
                           {"train", train_cfg_.to_json()},
                           {"step", step_},
                           {"adam_step", adam_.step}};
    if (!extra.is_null()) meta["extra"] = extra;
    save_checkpoint<T>(path, named, meta);
  }

  // Restores parameters, optimizer state and step counter from `path`. The
  // model configuration must match; the training schedule is taken from the
  // checkpoint except for `steps`.
  void resume(const std::string& path) {
    const CheckpointData ckpt = load_checkpoint(path);
    const auto& meta = ckpt.header.at("meta");
    if (ModelConfig::from_json(meta.at("model")).to_json() != model_cfg_.to_json()) {
      throw ValidationError("resume: checkpoint model config differs from the requested one");
    }
    const std::size_t steps = train_cfg_.steps;
    train_cfg_ = TrainConfig::from_json(meta.at("train"));
    train_cfg_.steps = steps;
    params_.load_from(ckpt);
    step_ = meta.at("step");
    adam_ = AdamState<T>{};
    adam_.step = meta.at("adam_step");
    if (adam_.step > 0) {
      for (const auto& [name, t] : params_.named()) {
        const auto& m = ckpt.find("adam.m." + name);
        const auto& v = ckpt.find("adam.v." + name);
        adam_.m.emplace_back(m.values.begin(), m.values.end());
        adam_.v.emplace_back(v.values.begin(), v.values.end());
      }
    }
  }

 private:
  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  std::vector<TrainingExample<T>> data_;
  ModelParams<T> params_;
  AdamState<T> adam_;
  std::size_t step_ = 0;
};

// Model config and parameters from a checkpoint.
template <typename T>
std::pair<ModelConfig, ModelParams<T>> load_model(const std::string& path) {
  const CheckpointData ckpt = load_checkpoint(path);
  const ModelConfig cfg = ModelConfig::from_json(ckpt.header.at("meta").at("model"));
  ModelParams<T> params = ModelParams<T>::init(cfg, 0);
  params.load_from(ckpt);
  return {cfg, std::move(params)};
}

}  // namespace cld
