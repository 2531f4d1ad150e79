#pragma once

// Shared helpers for the test binaries: random tensors and central
// finite-difference gradient checks in double precision.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cld/ops.hpp"

namespace cld::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng,
                                    bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor<double>(shape, std::move(v), requires_grad);
}

// Relative error between two vectors in the 2-norm.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / scale;
}

using ScalarFn = std::function<Tensor<double>()>;

// Analytic gradient of f() with respect to `x` after one backward pass.
inline std::vector<double> analytic_grad(const ScalarFn& f, const Tensor<double>& x) {
  Tensor<double> handle = x;
  handle.zero_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const Tensor<double> loss = f();
  tape.backward(loss);
  if (!handle.has_grad()) return std::vector<double>(x.numel(), 0.0);
  return {handle.grad().begin(), handle.grad().end()};
}

inline double eval_scalar(const ScalarFn& f) {
  NoGradScope<double> no_grad;
  return f().item();
}

// Central differences of f() with respect to every entry of `x`.
inline std::vector<double> numeric_grad(const ScalarFn& f, const Tensor<double>& x,
                                        double h = 1e-5) {
  Tensor<double> handle = x;
  auto values = handle.mutable_values();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = eval_scalar(f);
    values[i] = orig - h;
    const double down = eval_scalar(f);
    values[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Relative error of the full gradient of f() with respect to `x`.
inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double h = 1e-5) {
  const auto a = analytic_grad(f, x);
  const auto n = numeric_grad(f, x, h);
  return rel_error(a, n);
}

// Random-projection loss sum(w * y) so every output entry gets a distinct
// upstream gradient.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, false)));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cld_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace cld::testing
