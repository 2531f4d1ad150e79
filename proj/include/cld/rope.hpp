#pragma once

// Layer-aware rotary position embedding over (layer, height, width) indices
// and scaled dot-product attention with a key padding mask.
//
// Each head's channels are split into three contiguous slices [l | h | w].
// Within a slice of width d_c, channel pair (2j, 2j+1) is read as the
// complex number x_{2j} + i x_{2j+1} and rotated by p_c * theta_j with
// theta_j = base_c^(-2j / d_c). The rotated dot product of q_n and k_m is
// then sum_c Re[q^c_n conj(k^c_m) exp(i (p^c_n - p^c_m) theta)], a function
// of relative position only.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cld/ops.hpp"
#include "cld/tokenization.hpp"

namespace cld {

struct RopeConfig {
  std::size_t d_head = 32;
  std::size_t d_l = 8;
  std::size_t d_h = 12;
  std::size_t d_w = 12;
  double layer_base = 100.0;
  double spatial_base = 10000.0;

  // Roughly (d/4, 3d/8, 3d/8), each slice even.
  static RopeConfig for_head_dim(std::size_t d_head) {
    RopeConfig cfg;
    cfg.d_head = d_head;
    cfg.d_l = std::max<std::size_t>(2, (d_head / 4) / 2 * 2);
    cfg.d_h = std::max<std::size_t>(2, ((d_head - cfg.d_l) / 2) / 2 * 2);
    cfg.d_w = d_head - cfg.d_l - cfg.d_h;
    cfg.validate();
    return cfg;
  }

  void validate() const {
    const auto ok = [](std::size_t d) { return d >= 2 && d % 2 == 0; };
    if (d_l + d_h + d_w != d_head || !ok(d_l) || !ok(d_h) || !ok(d_w)) {
      throw ConfigError("rope: axis split (" + std::to_string(d_l) + "," +
                        std::to_string(d_h) + "," + std::to_string(d_w) +
                        ") must be even parts >= 2 summing to d_head " +
                        std::to_string(d_head));
    }
    if (!(layer_base > 1.0) || !(spatial_base > 1.0)) {
      throw ConfigError("rope: frequency bases must exceed 1");
    }
  }

  // Frequency of channel pair `pair` (0 <= pair < d_head/2) and the axis
  // (0 = l, 1 = h, 2 = w) it encodes.
  std::pair<double, int> pair_frequency(std::size_t pair) const {
    const std::size_t pl = d_l / 2, ph = d_h / 2;
    if (pair < pl) return {std::pow(layer_base, -2.0 * pair / d_l), 0};
    if (pair < pl + ph) return {std::pow(spatial_base, -2.0 * (pair - pl) / d_h), 1};
    return {std::pow(spatial_base, -2.0 * (pair - pl - ph) / d_w), 2};
  }
};

// Per-token cos/sin of every channel pair's rotation angle.
template <typename T>
struct RopeTable {
  std::size_t tokens = 0;
  std::size_t pairs = 0;
  std::vector<T> cos;
  std::vector<T> sin;

  RopeTable(const std::vector<Position>& positions, const RopeConfig& cfg) {
    cfg.validate();
    tokens = positions.size();
    pairs = cfg.d_head / 2;
    cos.resize(tokens * pairs);
    sin.resize(tokens * pairs);
    std::vector<std::pair<double, int>> freq(pairs);
    for (std::size_t j = 0; j < pairs; ++j) freq[j] = cfg.pair_frequency(j);
    for (std::size_t n = 0; n < tokens; ++n) {
      const int p[3] = {positions[n].l, positions[n].h, positions[n].w};
      for (std::size_t j = 0; j < pairs; ++j) {
        const double angle = static_cast<double>(p[freq[j].second]) * freq[j].first;
        cos[n * pairs + j] = static_cast<T>(std::cos(angle));
        sin[n * pairs + j] = static_cast<T>(std::sin(angle));
      }
    }
  }
};

// Rotates x [L, heads, d_head] (or [L, d_head]) by each token's position.
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, const RopeTable<T>& table) {
  const std::size_t d = table.pairs * 2;
  if (x.rank() < 2 || x.dim(0) != table.tokens || x.dim(-1) != d) {
    throw ConfigError("rope: tensor " + shape_str(x.shape()) + " does not match " +
                      std::to_string(table.tokens) + " tokens with d_head " +
                      std::to_string(d));
  }
  const std::size_t heads = x.numel() / (table.tokens * d);
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t n = 0; n < table.tokens; ++n) {
    const T* c = table.cos.data() + n * table.pairs;
    const T* s = table.sin.data() + n * table.pairs;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t base = (n * heads + hd) * d;
      for (std::size_t j = 0; j < table.pairs; ++j) {
        const T a = xv[base + 2 * j], b = xv[base + 2 * j + 1];
        out[base + 2 * j] = a * c[j] - b * s[j];
        out[base + 2 * j + 1] = a * s[j] + b * c[j];
      }
    }
  }
  Tensor<T> result = detail::make_output<T>(x.shape(), std::move(out), "rope");
  detail::attach(result, {&x}, [px = x.impl(), po = result.impl(), table, heads, d]() {
    auto& gx = px->ensure_grad();
    const auto& g = po->grad;
    for (std::size_t n = 0; n < table.tokens; ++n) {
      const T* c = table.cos.data() + n * table.pairs;
      const T* s = table.sin.data() + n * table.pairs;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t base = (n * heads + hd) * d;
        for (std::size_t j = 0; j < table.pairs; ++j) {
          const T ga = g[base + 2 * j], gb = g[base + 2 * j + 1];
          gx[base + 2 * j] += ga * c[j] + gb * s[j];
          gx[base + 2 * j + 1] += -ga * s[j] + gb * c[j];
        }
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, const std::vector<Position>& positions,
                     const RopeConfig& cfg) {
  if (x.dim(-1) != cfg.d_head) {
    throw ConfigError("rope: last axis " + std::to_string(x.dim(-1)) +
                      " does not match d_head " + std::to_string(cfg.d_head));
  }
  return apply_rope(x, RopeTable<T>(positions, cfg));
}

namespace detail {

inline void check_key_mask(std::span<const std::uint8_t> mask, std::size_t tokens) {
  if (mask.empty()) return;
  if (mask.size() != tokens) {
    throw ContractError("attention: mask has " + std::to_string(mask.size()) +
                        " entries for " + std::to_string(tokens) + " tokens");
  }
  bool any = false;
  for (auto m : mask) any = any || m != 0;
  if (!any) throw ContractError("attention: every key is masked");
}

template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// Row-softmax of scaled q k^T for one head; masked keys get zero weight.
template <typename T>
RowMat<T> attention_probs(const T* q, const T* k, std::size_t tokens, std::size_t heads,
                          std::size_t d, std::span<const std::uint8_t> mask) {
  StridedMap<T> Q(q, tokens, d, Eigen::OuterStride<>(heads * d));
  StridedMap<T> K(k, tokens, d, Eigen::OuterStride<>(heads * d));
  RowMat<T> S = (Q * K.transpose()) * (T{1} / std::sqrt(static_cast<T>(d)));
  for (std::size_t i = 0; i < tokens; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < tokens; ++j) {
      if (!mask.empty() && mask[j] == 0) continue;
      mx = std::max(mx, S(i, j));
    }
    T total{0};
    for (std::size_t j = 0; j < tokens; ++j) {
      const T e = (!mask.empty() && mask[j] == 0) ? T{0} : std::exp(S(i, j) - mx);
      S(i, j) = e;
      total += e;
    }
    S.row(i) /= total;
  }
  return S;
}

}  // namespace detail

// softmax(q k^T / sqrt(d_head) + mask) v per head, for [L, heads, d_head]
// inputs. mask[j] == 0 removes key j.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::span<const std::uint8_t> mask = {}) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q/k/v must share a [L, heads, d_head] shape, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  }
  const std::size_t L = q.dim(0), H = q.dim(1), d = q.dim(2);
  detail::check_key_mask(mask, L);
  std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
  std::vector<detail::RowMat<T>> probs(H);
  std::vector<T> out(q.numel());
  for (std::size_t h = 0; h < H; ++h) {
    probs[h] = detail::attention_probs(q.values().data() + h * d, k.values().data() + h * d,
                                       L, H, d, mask_copy);
    detail::StridedMap<T> V(v.values().data() + h * d, L, d, Eigen::OuterStride<>(H * d));
    detail::MutStridedMap<T> O(out.data() + h * d, L, d, Eigen::OuterStride<>(H * d));
    O.noalias() = probs[h] * V;
  }
  Tensor<T> result = detail::make_output<T>(q.shape(), std::move(out), "attention");
  detail::attach(
      result, {&q, &k, &v},
      [pq = q.impl(), pk = k.impl(), pv = v.impl(), po = result.impl(),
       probs = std::move(probs), L, H, d]() {
        const T scale = T{1} / std::sqrt(static_cast<T>(d));
        const Eigen::OuterStride<> stride(H * d);
        for (std::size_t h = 0; h < H; ++h) {
          const auto& P = probs[h];
          detail::StridedMap<T> G(po->grad.data() + h * d, L, d, stride);
          detail::StridedMap<T> V(pv->value.data() + h * d, L, d, stride);
          if (pv->requires_grad) {
            detail::MutStridedMap<T> GV(pv->ensure_grad().data() + h * d, L, d, stride);
            GV.noalias() += P.transpose() * G;
          }
          if (!pq->requires_grad && !pk->requires_grad) continue;
          detail::RowMat<T> dP = G * V.transpose();
          const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dP.cwiseProduct(P)).rowwise().sum();
          detail::RowMat<T> dS = P.cwiseProduct(dP.colwise() - rowdot) * scale;
          if (pq->requires_grad) {
            detail::StridedMap<T> K(pk->value.data() + h * d, L, d, stride);
            detail::MutStridedMap<T> GQ(pq->ensure_grad().data() + h * d, L, d, stride);
            GQ.noalias() += dS * K;
          }
          if (pk->requires_grad) {
            detail::StridedMap<T> Q(pq->value.data() + h * d, L, d, stride);
            detail::MutStridedMap<T> GK(pk->ensure_grad().data() + h * d, L, d, stride);
            GK.noalias() += dS.transpose() * Q;
          }
        }
      });
  return result;
}

// Attention with the rotary embedding applied to q and k first.
template <typename T>
Tensor<T> rope_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const RopeTable<T>& table, std::span<const std::uint8_t> mask = {}) {
  return scaled_dot_attention(apply_rope(q, table), apply_rope(k, table), v, mask);
}

template <typename T>
Tensor<T> rope_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const std::vector<Position>& positions, const RopeConfig& cfg,
                         std::span<const std::uint8_t> mask = {}) {
  if (q.dim(-1) != cfg.d_head) {
    throw ConfigError("attention: d_head " + std::to_string(q.dim(-1)) +
                      " does not match rope config " + std::to_string(cfg.d_head));
  }
  return rope_attention(q, k, v, RopeTable<T>(positions, cfg), mask);
}

// Attention matrices [heads][L][L] after rotary embedding (no tape).
template <typename T>
std::vector<detail::RowMat<T>> attention_matrices(const Tensor<T>& q, const Tensor<T>& k,
                                                  const std::vector<Position>& positions,
                                                  const RopeConfig& cfg,
                                                  std::span<const std::uint8_t> mask = {}) {
  NoGradScope<T> no_grad;
  const RopeTable<T> table(positions, cfg);
  const Tensor<T> qr = apply_rope(q, table);
  const Tensor<T> kr = apply_rope(k, table);
  const std::size_t L = q.dim(0), H = q.dim(1), d = q.dim(2);
  detail::check_key_mask(mask, L);
  std::vector<detail::RowMat<T>> out;
  for (std::size_t h = 0; h < H; ++h) {
    out.push_back(detail::attention_probs(qr.values().data() + h * d,
                                          kr.values().data() + h * d, L, H, d, mask));
  }
  return out;
}

}  // namespace cld
