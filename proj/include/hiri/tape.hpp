#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hiri/array.hpp"
#include "hiri/kernels.hpp"

namespace hiri {

/// A value with an optional gradient buffer. Parameters, BN running
/// statistics and standalone inputs are all Tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Array data, bool requires_grad = false)
      : data_(std::move(data)), requires_grad_(requires_grad) {}

  const Shape& shape() const { return data_.shape(); }
  Index size() const { return data_.size(); }
  Array& data() { return data_; }
  const Array& data() const { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  const std::optional<Array>& grad() const { return grad_; }
  std::optional<Array>& grad() { return grad_; }
  void zero_grad() { grad_.reset(); }
  void accumulate_grad(const Array& g);

  bool operator==(const Tensor& other) const {
    return requires_grad_ == other.requires_grad_ && data_ == other.data_;
  }

 private:
  Array data_;
  std::optional<Array> grad_;
  bool requires_grad_ = false;
};

enum class Mode { Train, Eval };

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(int axis) const { return value().dim(axis); }
  int rank() const { return value().rank(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed operations. Nodes are appended after their
/// inputs, so reverse insertion order is a reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable value.
  Var constant(Array value);
  /// Leaf owned by the tape; its gradient is read back with grad().
  Var leaf(Array value, bool requires_grad = true);
  /// Leaf backed by an external tensor; backward() accumulates into tensor.grad().
  Var bind(Tensor& tensor);

  /// Appends an op result. `backward` is dropped when no input needs a gradient.
  Var record(const char* op, Array value, std::initializer_list<Var> inputs, BackwardFn backward);

  bool needs_grad(const Var& v) const { return node(v).needs_grad; }
  /// Gradient accumulator for `v`, allocated on first use; null when `v` needs no gradient.
  Array* grad_sink(const Var& v);
  /// Gradient of the last backward() w.r.t. `v`; zeros if none reached it.
  Array grad(const Var& v) const;

  /// Reverse-mode sweep from a scalar loss.
  void backward(const Var& loss);

  bool grad_enabled() const { return grad_enabled_; }
  OpCounter* counter() const { return counter_; }
  void set_counter(OpCounter* counter) { counter_ = counter; }
  std::size_t size() const { return nodes_.size(); }

  const Array& value(const Var& v) const { return node(v).value; }

 private:
  struct Node {
    const char* op = "";
    Array value;
    std::optional<Array> grad;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  const Node& node(const Var& v) const;
  Node& node(const Var& v);
  Var push(Node node);

  std::deque<Node> nodes_;
  bool grad_enabled_;
  OpCounter* counter_ = nullptr;
};

inline const Array& Var::value() const { return tape_->value(*this); }

/// Runs `fn` with the tape's counter, or with a no-op counter when none is set.
template <typename Fn>
decltype(auto) with_counter(const Tape& tape, Fn&& fn) {
  if (OpCounter* counter = tape.counter()) return fn(*counter);
  NoCount none;
  return fn(none);
}

}  // namespace hiri
