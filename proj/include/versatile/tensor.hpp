// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a node holding its shape, values and
// (lazily allocated) gradient. Operations executed while a Tape is active
// append a backward closure to that tape; Tape::backward replays them in
// reverse recording order, which is a reverse topological order because an
// op can only consume tensors that already exist.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace versatile {

using Shape = std::vector<std::size_t>;

/// Operand extents are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on values (not shapes) was violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is outside its legal range.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

template <typename Real>
class Tape;

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const Tape<Real>* tape = nullptr;  // set when produced by a recorded op

  std::vector<Real>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real{0});
    return grad;
  }
};

template <typename Real = double>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real{0}) : node_(std::make_shared<Node>()) {
    validate(shape);
    node_->value.assign(versatile::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node>()) {
    validate(shape);
    if (versatile::numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<Real> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor parameter(Shape shape, Real fill = Real{0}) {
    Tensor t(std::move(shape), fill);
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t last_dim() const { return node_->shape.back(); }
  std::size_t numel() const { return node_->value.size(); }
  /// Number of rows when viewed as [numel / last_dim, last_dim].
  std::size_t rows() const { return numel() / last_dim(); }

  std::span<const Real> values() const { return node_->value; }
  std::span<Real> mutable_values() { return node_->value; }
  Real item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  Real operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient with the tensor's shape; all zeros when nothing reached it.
  std::span<const Real> grad() const { return node_->ensure_grad(); }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy that is disconnected from any tape.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

/// Ordered log of backward closures for one forward pass.
template <typename Real = double>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  /// Whether an op consuming `inputs` must be recorded.
  static bool should_record(std::initializer_list<const Tensor<Real>*> inputs) {
    if (active() == nullptr) return false;
    for (const auto* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  /// Marks `out` as produced on the active tape and stores its backward closure.
  void record(Tensor<Real>& out, std::function<void()> backward_fn) {
    out.node()->requires_grad = true;
    out.node()->tape = this;
    entries_.push_back({out.node(), std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays every entry once, newest first.
  void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (loss.node()->tape != this) {
      throw ContractError("backward() loss was not produced on this tape");
    }
    loss.node()->ensure_grad()[0] += Real{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->out->grad.empty()) it->backward();
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<Real>> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

/// Makes `tape` the active tape for the current thread for the scope's lifetime.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : previous_(Tape<Real>::active()) { Tape<Real>::active() = &tape; }
  ~TapeScope() { Tape<Real>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

/// Suspends recording for the scope's lifetime.
template <typename Real>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<Real>::active()) { Tape<Real>::active() = nullptr; }
  ~NoGradScope() { Tape<Real>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Real>* previous_;
};

/// Convenience: backward on the tape that produced `loss`.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  auto* tape = const_cast<Tape<Real>*>(loss.node()->tape);
  if (tape == nullptr) throw ContractError("backward() loss is not connected to a tape");
  tape->backward(loss);
}

}  // namespace versatile
