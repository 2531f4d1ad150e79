#pragma once

// Toy MMDiT velocity network over multi-layer token sequences.
//
// Text and image tokens keep separate weights (modulation, QKV, output
// projection, MLP) and meet in one joint attention with layer-aware rotary
// embedding. Timestep conditioning is adaLN: shift/scale/gate vectors per
// block computed from a sinusoidal embedding of t.

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "cld/checkpoint.hpp"
#include "cld/layers.hpp"
#include "cld/mlca.hpp"
#include "cld/rope.hpp"
#include "cld/tokenization.hpp"
#include "cld/vocab.hpp"

namespace cld {

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t mlp_ratio = 2;
  std::size_t patch_size = 8;
  std::size_t frame_size = 64;
  std::size_t max_layers = 6;  // background + foregrounds
  std::size_t vocab = 0;       // 0 selects the built-in vocabulary size
  std::size_t max_text_tokens = 24;
  std::size_t time_freq_dim = 64;
  bool mlca_every_block = false;
  double norm_eps = 1e-6;
  // What patch_out emits. "velocity" is the velocity itself. "clean" is an
  // estimate x0_hat of the clean tokens, turned into the velocity
  // (x_t - x0_hat) / max(t, t_floor). With patch_size 8 a token has 256
  // values against d_model 128, so a direct velocity head cannot carry the
  // noise through the hidden width; the clean head only has to produce image
  // content.
  std::string prediction = "clean";
  double t_floor = 0.05;

  std::size_t vocab_size() const { return vocab == 0 ? cld::vocab_size() : vocab; }
  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t token_dim() const { return kTokenChannels * patch_size * patch_size; }
  std::size_t grid_cells() const {
    return (frame_size / patch_size) * (frame_size / patch_size);
  }
  // Composite plus max_layers full-frame segments.
  std::size_t max_sequence() const { return (max_layers + 1) * grid_cells(); }
  RopeConfig rope() const { return RopeConfig::for_head_dim(d_head()); }

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (n_blocks == 0 || mlp_ratio == 0 || max_layers == 0 || time_freq_dim % 2 != 0) {
      throw ConfigError("model: n_blocks, mlp_ratio, max_layers must be positive and time_freq_dim even");
    }
    if (prediction != "velocity" && prediction != "clean") {
      throw ConfigError("model: prediction must be 'velocity' or 'clean', got '" + prediction + "'");
    }
    if (!(t_floor > 0.0 && t_floor <= 1.0)) throw ConfigError("model: t_floor must lie in (0, 1]");
    PatchGrid::make(frame_size, frame_size, patch_size);
    rope();
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},       {"n_heads", n_heads},
            {"n_blocks", n_blocks},     {"mlp_ratio", mlp_ratio},
            {"patch_size", patch_size}, {"frame_size", frame_size},
            {"max_layers", max_layers}, {"vocab", vocab_size()},
            {"max_text_tokens", max_text_tokens},
            {"time_freq_dim", time_freq_dim},
            {"mlca_every_block", mlca_every_block},
            {"norm_eps", norm_eps},
            {"prediction", prediction},
            {"t_floor", t_floor}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_blocks = j.at("n_blocks");
    c.mlp_ratio = j.at("mlp_ratio");
    c.patch_size = j.at("patch_size");
    c.frame_size = j.at("frame_size");
    c.max_layers = j.at("max_layers");
    c.vocab = j.at("vocab");
    c.max_text_tokens = j.at("max_text_tokens");
    c.time_freq_dim = j.at("time_freq_dim");
    c.mlca_every_block = j.at("mlca_every_block");
    c.norm_eps = j.at("norm_eps");
    c.prediction = j.value("prediction", std::string("velocity"));
    c.t_floor = j.value("t_floor", c.t_floor);
    c.validate();
    return c;
  }
};

template <typename T>
struct StreamParams {
  Linear<T> mod;  // d -> 6d: shift1, scale1, gate1, shift2, scale2, gate2
  Linear<T> qkv;
  Linear<T> out;
  Linear<T> mlp_in;
  Linear<T> mlp_out;
};

template <typename T>
struct BlockParams {
  StreamParams<T> img;
  StreamParams<T> txt;
  bool txt_post = true;  // the last block does not update text tokens
};

template <typename T>
struct ModelParams {
  Tensor<T> text_embed;  // [vocab, d]
  Tensor<T> text_pos;    // [max_text_tokens, d]
  Tensor<T> null_text;   // [1, d]
  Tensor<T> role_embed;  // [3, d]: composite, background, foreground
  Linear<T> time_in;
  Linear<T> time_out;
  Linear<T> patch_in;
  MlcaParams<T> mlca;
  std::vector<BlockParams<T>> blocks;
  Linear<T> final_mod;  // d -> 2d: shift, scale
  Linear<T> patch_out;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d_model;
    constexpr double kEmbedStd = 0.5;
    constexpr double kModStd = 0.02;
    ModelParams p;
    p.text_embed = random_normal<T>(Shape{cfg.vocab_size(), d}, kEmbedStd, rng);
    p.text_pos = random_normal<T>(Shape{cfg.max_text_tokens, d}, kEmbedStd, rng);
    p.null_text = random_normal<T>(Shape{1, d}, kEmbedStd, rng);
    p.role_embed = random_normal<T>(Shape{3, d}, kEmbedStd, rng);
    p.time_in = Linear<T>::init(cfg.time_freq_dim, d, rng);
    p.time_out = Linear<T>::init(d, d, rng);
    p.patch_in = Linear<T>::init(cfg.token_dim(), d, rng);
    p.mlca = MlcaParams<T>::init(cfg.patch_size, d, rng);
    const auto init_stream = [&](bool post) {
      StreamParams<T> s;
      s.mod = Linear<T>::init(d, 6 * d, rng, kModStd);
      s.qkv = Linear<T>::init(d, 3 * d, rng);
      if (post) {
        s.out = Linear<T>::init(d, d, rng);
        s.mlp_in = Linear<T>::init(d, cfg.mlp_ratio * d, rng);
        s.mlp_out = Linear<T>::init(cfg.mlp_ratio * d, d, rng);
      }
      return s;
    };
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      BlockParams<T> blk;
      blk.txt_post = b + 1 < cfg.n_blocks;
      blk.img = init_stream(true);
      blk.txt = init_stream(blk.txt_post);
      p.blocks.push_back(std::move(blk));
    }
    p.final_mod = Linear<T>::init(d, 2 * d, rng, kModStd);
    p.patch_out = Linear<T>::init(d, cfg.token_dim(), rng, kModStd);
    return p;
  }

  // Every learnable tensor with a stable name, in a fixed order.
  NamedTensors<T> named() const {
    NamedTensors<T> out;
    out.emplace_back("text_embed", text_embed);
    out.emplace_back("text_pos", text_pos);
    out.emplace_back("null_text", null_text);
    out.emplace_back("role_embed", role_embed);
    time_in.collect("time_in", out);
    time_out.collect("time_out", out);
    patch_in.collect("patch_in", out);
    mlca.collect(out);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string prefix = "blocks." + std::to_string(b) + ".";
      const auto stream = [&](const StreamParams<T>& s, const std::string& name, bool post) {
        s.mod.collect(prefix + name + ".mod", out);
        s.qkv.collect(prefix + name + ".qkv", out);
        if (!post) return;
        s.out.collect(prefix + name + ".out", out);
        s.mlp_in.collect(prefix + name + ".mlp_in", out);
        s.mlp_out.collect(prefix + name + ".mlp_out", out);
      };
      stream(blocks[b].img, "img", true);
      stream(blocks[b].txt, "txt", blocks[b].txt_post);
    }
    final_mod.collect("final_mod", out);
    patch_out.collect("patch_out", out);
    return out;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named()) {
      Tensor<T> handle = t;
      handle.zero_grad();
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }

  // Overwrites values from a checkpoint (shapes must match).
  void load_from(const CheckpointData& ckpt) const {
    for (auto& [name, t] : named()) {
      const CheckpointTensor& src = ckpt.find(name);
      if (src.shape != t.shape()) {
        throw ValidationError("checkpoint tensor '" + name + "' has shape " +
                              shape_str(src.shape) + ", model expects " + shape_str(t.shape()));
      }
      Tensor<T> handle = t;
      auto dst = handle.mutable_values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.values[i]);
    }
  }
};

// Token ids to embeddings; an empty prompt is the single null token.
template <typename T>
Tensor<T> embed_text(const ModelParams<T>& params, const ModelConfig& cfg,
                     const std::vector<int>& ids) {
  if (ids.empty()) return params.null_text;
  if (ids.size() > cfg.max_text_tokens) {
    throw ValidationError("capacity: prompt has " + std::to_string(ids.size()) +
                          " tokens, max_text_tokens is " + std::to_string(cfg.max_text_tokens));
  }
  std::vector<std::size_t> rows, pos;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg.vocab_size()) {
      throw ValidationError("vocabulary: token id " + std::to_string(ids[i]) +
                            " outside vocabulary of " + std::to_string(cfg.vocab_size()));
    }
    rows.push_back(static_cast<std::size_t>(ids[i]));
    pos.push_back(i);
  }
  return add(gather_rows(params.text_embed, rows), gather_rows(params.text_pos, pos));
}

// [cos(t * 1000 * f_i), sin(t * 1000 * f_i)] with geometric f_i.
template <typename T>
Tensor<T> timestep_features(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    v[i] = static_cast<T>(std::cos(1000.0 * t * freq));
    v[half + i] = static_cast<T>(std::sin(1000.0 * t * freq));
  }
  return Tensor<T>(Shape{1, dim}, std::move(v));
}

namespace detail {

inline std::size_t segment_role(int layer_id) {
  return layer_id == kCompositeLayer ? 0 : layer_id == kBackgroundLayer ? 1 : 2;
}

template <typename T>
struct StreamMod {
  Tensor<T> shift1, scale1, gate1, shift2, scale2, gate2;
};

template <typename T>
StreamMod<T> stream_mod(const Linear<T>& mod, const Tensor<T>& cond, std::size_t d) {
  const Tensor<T> m = mod(cond);
  return StreamMod<T>{slice_last(m, 0, d),     slice_last(m, d, d),
                      slice_last(m, 2 * d, d), slice_last(m, 3 * d, d),
                      slice_last(m, 4 * d, d), slice_last(m, 5 * d, d)};
}

template <typename T>
Tensor<T> stream_post(const StreamParams<T>& s, const StreamMod<T>& m, const Tensor<T>& x,
                      const Tensor<T>& attn, const Tensor<T>& ones, T eps) {
  Tensor<T> h = add(x, mul(m.gate1, s.out(attn)));
  const Tensor<T> y = modulate(rms_norm(h, ones, eps), m.shift2, m.scale2);
  return add(h, mul(m.gate2, s.mlp_out(gelu(s.mlp_in(y)))));
}

}  // namespace detail

// Predicted velocity [L, token_dim] for noisy tokens laid out as `layout`.
// Passing no guidance runs the network without the image adapter.
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const ModelConfig& cfg,
                  const Tensor<T>& noisy_tokens, const TokenSequence<T>& layout, double t,
                  const std::vector<int>& text, const std::type_identity_t<GuidanceSequence<T>>* guidance) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("forward: t must lie in [0, 1]");
  const std::size_t L = layout.length();
  if (L > cfg.max_sequence() + layout.padding) {
    throw ValidationError("capacity: sequence of " + std::to_string(L) +
                          " tokens exceeds the configured maximum " +
                          std::to_string(cfg.max_sequence()));
  }
  if (noisy_tokens.rank() != 2 || noisy_tokens.dim(0) != L ||
      noisy_tokens.dim(1) != cfg.token_dim()) {
    throw DimensionError("forward: tokens " + shape_str(noisy_tokens.shape()) +
                         " do not match layout of " + std::to_string(L) + " x " +
                         std::to_string(cfg.token_dim()));
  }
  const std::size_t d = cfg.d_model;
  const T eps = static_cast<T>(cfg.norm_eps);
  const Tensor<T> ones = Tensor<T>::full(Shape{d}, T{1});

  // Guidance rows for padding tokens are zero.
  Tensor<T> guide;
  if (guidance != nullptr) {
    if (guidance->tokens.dim(0) != layout.valid_length() || guidance->tokens.dim(1) != d) {
      throw ContractError("forward: guidance " + shape_str(guidance->tokens.shape()) +
                          " is not aligned with " + std::to_string(layout.valid_length()) +
                          " tokens");
    }
    guide = layout.padding == 0
                ? guidance->tokens
                : concat_rows<T>({guidance->tokens, Tensor<T>(Shape{layout.padding, d})});
  }

  std::vector<std::size_t> roles(L, 0);
  for (const auto& s : layout.segments) {
    for (std::size_t i = 0; i < s.len; ++i) roles[s.start + i] = detail::segment_role(s.layer_id);
  }
  Tensor<T> img = add(params.patch_in(noisy_tokens), gather_rows(params.role_embed, roles));
  if (guidance != nullptr) img = fuse(img, GuidanceSequence<T>{guide, guidance->source_boxes});

  Tensor<T> txt = embed_text(params, cfg, text);
  const std::size_t Lt = txt.dim(0);

  const Tensor<T> cond = silu(params.time_out(silu(params.time_in(
      timestep_features<T>(t, cfg.time_freq_dim)))));

  std::vector<Position> positions;
  positions.reserve(Lt + L);
  for (std::size_t i = 0; i < Lt; ++i) positions.push_back(Position{-1, 0, static_cast<int>(i)});
  positions.insert(positions.end(), layout.positions.begin(), layout.positions.end());
  const RopeTable<T> table(positions, cfg.rope());
  std::vector<std::uint8_t> mask(Lt, 1);
  const auto img_mask = layout.key_mask();
  mask.insert(mask.end(), img_mask.begin(), img_mask.end());

  const std::size_t H = cfg.n_heads, dh = cfg.d_head();
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto& blk = params.blocks[b];
    if (b > 0 && cfg.mlca_every_block && guidance != nullptr) img = add(img, guide);
    const auto mi = detail::stream_mod(blk.img.mod, cond, d);
    const auto mt = detail::stream_mod(blk.txt.mod, cond, d);
    const Tensor<T> xi = modulate(rms_norm(img, ones, eps), mi.shift1, mi.scale1);
    const Tensor<T> xt = modulate(rms_norm(txt, ones, eps), mt.shift1, mt.scale1);
    const Tensor<T> qkv_i = blk.img.qkv(xi);
    const Tensor<T> qkv_t = blk.txt.qkv(xt);
    const auto joint = [&](std::size_t offset) {
      return reshape(concat_rows<T>({slice_last(qkv_t, offset, d), slice_last(qkv_i, offset, d)}),
                     Shape{Lt + L, H, dh});
    };
    const Tensor<T> attn =
        reshape(rope_attention(joint(0), joint(d), joint(2 * d), table, mask), Shape{Lt + L, d});
    const Tensor<T> attn_t = slice_rows(attn, 0, Lt);
    const Tensor<T> attn_i = slice_rows(attn, Lt, L);
    img = detail::stream_post(blk.img, mi, img, attn_i, ones, eps);
    if (blk.txt_post) txt = detail::stream_post(blk.txt, mt, txt, attn_t, ones, eps);
  }

  const Tensor<T> fm = params.final_mod(cond);
  const Tensor<T> y = modulate(rms_norm(img, ones, eps), slice_last(fm, 0, d), slice_last(fm, d, d));
  const Tensor<T> head = params.patch_out(y);
  if (cfg.prediction == "velocity") return head;
  return scale(sub(noisy_tokens, head), static_cast<T>(1.0 / std::max(t, cfg.t_floor)));
}

}  // namespace cld
