#pragma once

#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>

#include "mulvit/common.hpp"

namespace mulvit {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first backward contribution
  bool requires_grad = false;
};

/// Dense n-dimensional tensor. A cheap shared handle: copies alias the same
/// storage, clone() deep-copies. Gradients accumulate additively into `grad`
/// when a Tape replays its records.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    const int64_t n = checked_numel(shape);
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(n), T(0));
    return t;
  }

  static TensorT full(Shape shape, T v) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data) {
    const int64_t n = checked_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " needs " + std::to_string(n) +
                       " values, got " + std::to_string(data.size()));
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor with numel " + std::to_string(numel()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient, zero-filled if never written.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(node_->value.size(), T(0));
    return node_->grad;
  }
  std::vector<T>& grad_buffer() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of values and flags; gradient state is not copied.
  TensorT clone() const {
    TensorT t = from_data(node_->shape, node_->value);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Row-major element access, mostly for tests and small setups.
  T& at(std::initializer_list<int64_t> idx) { return node_->value[offset(idx)]; }
  T at(std::initializer_list<int64_t> idx) const { return node_->value[offset(idx)]; }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  bool same_storage(const TensorT& other) const { return node_ == other.node_; }

 private:
  static int64_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ShapeError("rank-0 tensors are not supported");
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
    return shape_numel(shape);
  }

  size_t offset(std::initializer_list<int64_t> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      off = off * s[k] + i;
      ++k;
    }
    return static_cast<size_t>(off);
  }

  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of executed differentiable operations. Replaying in reverse
/// visits each op exactly once; every input consumed by k ops receives the sum
/// of k contributions. One tape is owned by one executor at a time; ops record
/// onto the thread's active tape (see Scope).
template <typename T>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  /// RAII activation: ops executed inside the scope are recorded here.
  class Scope {
   public:
    explicit Scope(TapeT& tape) : prev_(active_) { active_ = &tape; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* active() { return active_; }

  /// Registers one executed op: its output node plus the closure that routes
  /// the output gradient back to the inputs.
  void record(std::shared_ptr<TensorNode<T>> output, std::function<void()> step) {
    outputs_.push_back(std::move(output));
    steps_.push_back(std::move(step));
  }
  size_t size() const { return steps_.size(); }
  void clear() {
    steps_.clear();
    outputs_.clear();
  }

  /// Seeds d(loss)/d(loss)=1 and replays the tape in reverse. Gradients of
  /// op outputs (intermediates) are reset first, so each call adds exactly
  /// d(loss)/d(tensor) to tensors created outside the tape — repeated calls
  /// without zero_grad accumulate.
  void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    for (auto& n : outputs_) n->grad.clear();
    loss.node()->grad.assign(1, T(1));
    for (size_t i = steps_.size(); i-- > 0;) steps_[i]();
  }

 private:
  inline static thread_local TapeT* active_ = nullptr;
  std::vector<std::function<void()>> steps_;
  std::vector<std::shared_ptr<TensorNode<T>>> outputs_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

/// True when the thread has an active tape and some input carries gradient.
template <typename T>
inline bool tracing(std::initializer_list<const TensorT<T>*> inputs) {
  if (TapeT<T>::active() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
inline std::vector<T>& acc_grad(const std::shared_ptr<TensorNode<T>>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
  return n->grad;
}

}  // namespace detail

}  // namespace mulvit
