#pragma once

// Dense row-major tensors with a tape for reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, as in most
// autograd libraries. Operations (see ops.hpp) record a backward closure on
// the tape that is active on the calling thread; with no active tape they
// only compute values.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cld/errors.hpp"

namespace cld {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline std::atomic<bool>& finite_check_flag() {
#ifdef NDEBUG
  static std::atomic<bool> flag{false};
#else
  static std::atomic<bool> flag{true};
#endif
  return flag;
}

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::uint64_t id = next_tensor_id();

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Enables NaN/Inf detection on every op output. On by default in debug builds.
inline void set_check_finite(bool enabled) {
  detail::finite_check_flag().store(enabled);
}
inline bool check_finite_enabled() { return detail::finite_check_flag().load(); }

template <typename T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->value.assign(shape_numel(shape), T{0});
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), fill);
    return t;
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) +
                           " out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> values() const { return impl_->value; }
  // Mutable access is meant for leaves (parameters, inputs) only.
  std::span<T> mutable_values() { return impl_->value; }
  T operator[](std::size_t i) const { return impl_->value[i]; }
  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  std::uint64_t id() const { return impl_->id; }

  // Fresh storage with the same values, detached from any tape.
  Tensor detach() const { return Tensor(shape(), impl_->value, false); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Records differentiable operations in execution order and replays them in
// reverse. One tape belongs to one thread at a time.
template <typename T>
class Tape {
 public:
  struct Node {
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
    std::shared_ptr<detail::TensorImpl<T>> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::uint64_t> input_ids,
              std::shared_ptr<detail::TensorImpl<T>> output,
              std::function<void()> backward) {
    Node node;
    node.input_ids = std::move(input_ids);
    node.output_id = output->id;
    node.output = std::move(output);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Accumulates d(loss)/d(leaf) into every reachable leaf's grad, then
  // clears the tape.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape())
                                          : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss with no differentiable inputs");
    }
    loss.impl()->ensure_grad()[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
    clear();
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Node> nodes_;
};

// Makes `tape` the active tape for this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) {
    Tape<T>::active() = &tape;
  }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording for the scope's lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Runs backward on the thread's active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) {
    throw ContractError("backward() called with no active tape");
  }
  tape->backward(loss);
}

}  // namespace cld
