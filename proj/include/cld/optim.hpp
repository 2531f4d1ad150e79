#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cld/tensor.hpp"

namespace cld {

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update using each parameter's accumulated grad.
// Parameters without a grad are treated as having a zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state,
               const AdamConfig<T>& cfg) {
  if (!(cfg.lr > T{0})) throw ConfigError("adam: learning rate must be positive");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T{0});
      state.v.emplace_back(p.numel(), T{0});
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam: state holds " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " params");
  }
  ++state.step;
  const T bc1 = T{1} - std::pow(cfg.beta1, static_cast<T>(state.step));
  const T bc2 = T{1} - std::pow(cfg.beta2, static_cast<T>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != params[p].numel() || v.size() != params[p].numel()) {
      throw DimensionError("adam: state shape mismatch for param " + std::to_string(p));
    }
    auto w = params[p].mutable_values();
    const auto g = params[p].grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g.empty() ? T{0} : g[i];
      m[i] = cfg.beta1 * m[i] + (T{1} - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (T{1} - cfg.beta2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Global L2 norm of all gradients.
template <typename T>
T grad_norm(std::span<const Tensor<T>> params) {
  double acc = 0;
  for (const auto& p : params) {
    for (T g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return static_cast<T>(std::sqrt(acc));
}

// Scales every gradient so the global norm is at most max_norm.
template <typename T>
T clip_grad_norm(std::span<Tensor<T>> params, T max_norm) {
  const T norm = grad_norm<T>(std::span<const Tensor<T>>(params.data(), params.size()));
  if (max_norm > T{0} && norm > max_norm) {
    const T s = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace cld
