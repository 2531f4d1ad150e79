#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cld/ops.hpp"

namespace cld {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T> random_normal(Shape shape, double std_dev, std::mt19937_64& rng,
                        bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<T> values(shape_numel(shape));
  for (T& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

// y = x W + b with W [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng,
                     double std_dev = -1.0) {
    if (std_dev < 0) std_dev = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = random_normal<T>(Shape{in, out}, std_dev, rng);
    l.bias = Tensor<T>(Shape{out}, true);
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// x * (1 + scale) + shift, with [1, d] scale/shift broadcast over rows.
template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_) {
  return add(mul(x, add_scalar(scale_, T{1})), shift);
}

}  // namespace cld
