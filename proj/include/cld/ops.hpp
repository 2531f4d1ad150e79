#pragma once

// Differentiable tensor operations. Every op computes its value eagerly and,
// when a tape is active and some input requires a gradient, records the
// matching backward rule.

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "cld/tensor.hpp"

namespace cld {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_values(const std::vector<T>& values, std::string_view op) {
  if (!check_finite_enabled()) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value produced by " + std::string(op) +
                         " at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, std::string_view op) {
  check_values(values, op);
  return Tensor<T>(std::move(shape), std::move(values), false);
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Registers `fn` as the backward rule producing `out`, if recording.
template <typename T, typename F>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
            F&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr || !any_requires_grad<T>(inputs)) return;
  out.set_requires_grad(true);
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor<T>* t : inputs) ids.push_back(t->id());
  tape->record(std::move(ids), out.impl(), std::function<void()>(std::forward<F>(fn)));
}

template <typename T>
void attach_many(Tensor<T>& out, const std::vector<Tensor<T>>& inputs,
                 std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  std::vector<std::uint64_t> ids;
  for (const auto& t : inputs) ids.push_back(t.id());
  tape->record(std::move(ids), out.impl(), std::move(fn));
}

// Numpy-style broadcasting of two shapes.
struct BroadcastPlan {
  enum class Kind { kSame, kSuffixB, kSuffixA, kGeneral };
  Kind kind = Kind::kSame;
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast axes
  std::size_t numel_a = 0, numel_b = 0;
};

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b,
                                    std::string_view op) {
  BroadcastPlan plan;
  plan.numel_a = shape_numel(a);
  plan.numel_b = shape_numel(b);
  if (a == b) {
    plan.kind = BroadcastPlan::Kind::kSame;
    plan.out = a;
    return plan;
  }
  if (is_suffix(b, a)) {
    plan.kind = BroadcastPlan::Kind::kSuffixB;
    plan.out = a;
    return plan;
  }
  if (is_suffix(a, b)) {
    plan.kind = BroadcastPlan::Kind::kSuffixA;
    plan.out = b;
    return plan;
  }
  plan.kind = BroadcastPlan::Kind::kGeneral;
  const std::size_t r = std::max(a.size(), b.size());
  plan.out.assign(r, 1);
  std::vector<std::size_t> da(r, 1), db(r, 1);
  std::copy(a.begin(), a.end(), da.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), db.begin() + static_cast<long>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) + " are not broadcastable");
    }
    plan.out[i] = std::max(da[i], db[i]);
  }
  plan.stride_a.assign(r, 0);
  plan.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    plan.stride_a[i] = da[i] == 1 ? 0 : sa;
    plan.stride_b[i] = db[i] == 1 ? 0 : sb;
    sa *= da[i];
    sb *= db[i];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  switch (plan.kind) {
    case BroadcastPlan::Kind::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case BroadcastPlan::Kind::kSuffixB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % plan.numel_b);
      return;
    case BroadcastPlan::Kind::kSuffixA:
      for (std::size_t i = 0; i < n; ++i) f(i, i % plan.numel_a, i);
      return;
    case BroadcastPlan::Kind::kGeneral: {
      const std::size_t r = plan.out.size();
      std::vector<std::size_t> idx(r, 0);
      std::size_t ia = 0, ib = 0;
      for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
          ++idx[d];
          ia += plan.stride_a[d];
          ib += plan.stride_b[d];
          if (idx[d] < plan.out[d]) break;
          ia -= plan.stride_a[d] * idx[d];
          ib -= plan.stride_b[d] * idx[d];
          idx[d] = 0;
        }
      }
      return;
    }
  }
}

// Elementwise binary op with broadcasting. dfa/dfb give the partial
// derivatives at (x, y).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa,
                    DB dfb, std::string_view name) {
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(shape_numel(plan.out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = f(av[ia], bv[ib]);
  });
  Tensor<T> result = make_output<T>(plan.out, std::move(out), name);
  attach(result, {&a, &b},
         [pa = a.impl(), pb = b.impl(), po = result.impl(), plan, dfa, dfb]() {
           const auto& g = po->grad;
           const auto& av = pa->value;
           const auto& bv = pb->value;
           if (pa->requires_grad) {
             auto& ga = pa->ensure_grad();
             for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
               ga[ia] += g[i] * dfa(av[ia], bv[ib]);
             });
           }
           if (pb->requires_grad) {
             auto& gb = pb->ensure_grad();
             for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
               gb[ib] += g[i] * dfb(av[ia], bv[ib]);
             });
           }
         });
  return result;
}

// Elementwise unary op; df receives (x, f(x)).
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df, std::string_view name) {
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tensor<T> result = make_output<T>(a.shape(), std::move(out), name);
  attach(result, {&a}, [pa = a.impl(), po = result.impl(), df]() {
    auto& ga = pa->ensure_grad();
    const auto& g = po->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * df(pa->value[i], po->value[i]);
    }
  });
  return result;
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; }, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; }, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; }, "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
      [](T x, T y) { return -x / (y * y); }, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return x + c; }, [](T, T) { return T{1}; }, "add_scalar");
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; }, "square");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; },
      "tanh");
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x / (T{1} + std::exp(-x)); },
      [](T x, T) {
        const T s = T{1} / (T{1} + std::exp(-x));
        return s * (T{1} + x * (T{1} - s));
      },
      "silu");
}

// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return detail::unary_op(
      a,
      [](T x) { return T(0.5) * x * (T{1} + std::tanh(kC * (x + kA * x * x * x))); },
      [](T x, T) {
        const T u = kC * (x + kA * x * x * x);
        const T th = std::tanh(u);
        const T du = kC * (T{1} + T{3} * kA * x * x);
        return T(0.5) * (T{1} + th) + T(0.5) * x * (T{1} - th * th) * du;
      },
      "gelu");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (T v : a.values()) acc += v;
  Tensor<T> result = detail::make_output<T>(Shape{1}, {acc}, "sum");
  detail::attach(result, {&a}, [pa = a.impl(), po = result.impl()]() {
    auto& ga = pa->ensure_grad();
    const T g = po->grad[0];
    for (auto& x : ga) x += g;
  });
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  detail::BroadcastPlan plan;
  try {
    plan = detail::plan_broadcast(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dims of " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " are not broadcastable");
  }
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  // Batch index triples (out, a, b).
  std::vector<std::array<std::size_t, 3>> pairs;
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    pairs.push_back({i, ia, ib});
  });
  if (pairs.empty()) pairs.push_back({0, 0, 0});

  std::vector<T> out(shape_numel(out_shape));
  for (const auto& [io, ia, ib] : pairs) {
    detail::ConstMatMap<T> A(a.values().data() + ia * m * k, m, k);
    detail::ConstMatMap<T> B(b.values().data() + ib * k * n, k, n);
    detail::MatMap<T> C(out.data() + io * m * n, m, n);
    C.noalias() = A * B;
  }
  Tensor<T> result = detail::make_output<T>(out_shape, std::move(out), "matmul");
  detail::attach(result, {&a, &b},
                 [pa = a.impl(), pb = b.impl(), po = result.impl(), pairs, m, k, n]() {
                   for (const auto& [io, ia, ib] : pairs) {
                     detail::ConstMatMap<T> G(po->grad.data() + io * m * n, m, n);
                     if (pa->requires_grad) {
                       detail::ConstMatMap<T> B(pb->value.data() + ib * k * n, k, n);
                       detail::MatMap<T> GA(pa->ensure_grad().data() + ia * m * k, m, k);
                       GA.noalias() += G * B.transpose();
                     }
                     if (pb->requires_grad) {
                       detail::ConstMatMap<T> A(pa->value.data() + ia * m * k, m, k);
                       detail::MatMap<T> GB(pb->ensure_grad().data() + ib * k * n, k, n);
                       GB.noalias() += A.transpose() * G;
                     }
                   }
                 });
  return result;
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const std::size_t r = a.dim(-2), c = a.dim(-1);
  const std::size_t batches = a.numel() / (r * c);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<T> out(a.numel());
  const auto av = a.values();
  for (std::size_t bi = 0; bi < batches; ++bi) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        out[bi * r * c + j * r + i] = av[bi * r * c + i * c + j];
      }
    }
  }
  Tensor<T> result = detail::make_output<T>(shape, std::move(out), "transpose");
  detail::attach(result, {&a}, [pa = a.impl(), po = result.impl(), r, c, batches]() {
    auto& ga = pa->ensure_grad();
    for (std::size_t bi = 0; bi < batches; ++bi) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          ga[bi * r * c + i * c + j] += po->grad[bi * r * c + j * r + i];
        }
      }
    }
  });
  return result;
}

// Max-stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const std::size_t len = x.shape()[ax];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  Tensor<T> result = detail::make_output<T>(x.shape(), std::move(out), "softmax");
  detail::attach(result, {&x}, [px = x.impl(), po = result.impl(), outer, inner, len]() {
    auto& gx = px->ensure_grad();
    const auto& y = po->value;
    const auto& g = po->grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot{0};
        for (std::size_t j = 0; j < len; ++j) {
          dot += g[base + j * inner] * y[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return result;
}

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (eps < T{0}) throw ConfigError("rms_norm: eps must be non-negative");
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d) {
    throw DimensionError("rms_norm: gain shape " + shape_str(gain.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  std::vector<T> out(xv.size());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ms{0};
    for (std::size_t j = 0; j < d; ++j) ms += xv[r * d + j] * xv[r * d + j];
    ms /= static_cast<T>(d);
    const T denom = std::sqrt(ms + eps);
    // Zero rows stay zero even when eps == 0.
    inv[r] = denom > T{0} ? T{1} / denom : T{0};
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * inv[r] * gv[j];
  }
  Tensor<T> result = detail::make_output<T>(x.shape(), std::move(out), "rms_norm");
  detail::attach(result, {&x, &gain},
                 [px = x.impl(), pg = gain.impl(), po = result.impl(), inv, rows, d]() {
                   const auto& g = po->grad;
                   const auto& xv = px->value;
                   const auto& gv = pg->value;
                   if (px->requires_grad) {
                     auto& gx = px->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       T dot{0};
                       for (std::size_t j = 0; j < d; ++j) {
                         dot += g[r * d + j] * gv[j] * xv[r * d + j];
                       }
                       const T c = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(d);
                       for (std::size_t j = 0; j < d; ++j) {
                         gx[r * d + j] += inv[r] * gv[j] * g[r * d + j] - xv[r * d + j] * c;
                       }
                     }
                   }
                   if (pg->requires_grad) {
                     auto& gg = pg->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < d; ++j) {
                         gg[j] += g[r * d + j] * xv[r * d + j] * inv[r];
                       }
                     }
                   }
                 });
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> values(a.values().begin(), a.values().end());
  Tensor<T> result = Tensor<T>(std::move(shape), std::move(values));
  detail::attach(result, {&a}, [pa = a.impl(), po = result.impl()]() {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += po->grad[i];
  });
  return result;
}

// Concatenates along axis 0; trailing axes must agree.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() == 0 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1,
                                     p.shape().end())) {
      throw DimensionError("concat_rows: trailing shape mismatch " +
                           shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    rows += p.shape()[0];
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<T> out;
  out.reserve(shape_numel(shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor<T> result = Tensor<T>(std::move(shape), std::move(out));
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  detail::attach_many(result, parts, [impls, po = result.impl()]() {
    std::size_t offset = 0;
    for (const auto& p : impls) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        auto& gp = p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gp[i] += po->grad[offset + i];
      }
      offset += n;
    }
  });
  return result;
}

// Rows [start, start + count) along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (a.rank() == 0 || start + count > a.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " +
                         shape_str(a.shape()));
  }
  const std::size_t row = a.numel() / a.shape()[0];
  Shape shape = a.shape();
  shape[0] = count;
  std::vector<T> out(a.values().begin() + static_cast<long>(start * row),
                     a.values().begin() + static_cast<long>((start + count) * row));
  Tensor<T> result = Tensor<T>(std::move(shape), std::move(out));
  detail::attach(result, {&a}, [pa = a.impl(), po = result.impl(), start, row]() {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < po->grad.size(); ++i) ga[start * row + i] += po->grad[i];
  });
  return result;
}

// Columns [start, start + count) along the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t start, std::size_t count) {
  const std::size_t d = a.dim(-1);
  if (start + count > d) {
    throw DimensionError("slice_last: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " +
                         shape_str(a.shape()));
  }
  const std::size_t rows = a.numel() / d;
  Shape shape = a.shape();
  shape.back() = count;
  std::vector<T> out(rows * count);
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + static_cast<long>(r * d + start), count,
                out.begin() + static_cast<long>(r * count));
  }
  Tensor<T> result = Tensor<T>(std::move(shape), std::move(out));
  detail::attach(result, {&a}, [pa = a.impl(), po = result.impl(), rows, d, start, count]() {
    auto& ga = pa->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) {
        ga[r * d + start + j] += po->grad[r * count + j];
      }
    }
  });
  return result;
}

// out[i] = table[ids[i]] along axis 0 (embedding lookup / crop gather).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() == 0) throw DimensionError("gather_rows: scalar table");
  const std::size_t n_rows = table.shape()[0];
  const std::size_t row = table.numel() / std::max<std::size_t>(n_rows, 1);
  Shape shape = table.shape();
  shape[0] = ids.size();
  std::vector<T> out(ids.size() * row);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n_rows) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) +
                           " out of " + std::to_string(n_rows) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<long>(ids[i] * row), row,
                out.begin() + static_cast<long>(i * row));
  }
  Tensor<T> result = Tensor<T>(std::move(shape), std::move(out));
  detail::attach(result, {&table}, [pt = table.impl(), po = result.impl(), ids, row]() {
    auto& gt = pt->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < row; ++j) gt[ids[i] * row + j] += po->grad[i * row + j];
    }
  });
  return result;
}

// x @ weight + bias with weight [in, out], bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace cld
