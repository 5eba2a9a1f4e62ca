#include "hiri/tape.hpp"

namespace hiri {

void Tensor::accumulate_grad(const Array& g) {
  if (g.shape() != data_.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match tensor " +
                         shape_string(data_.shape()));
  }
  if (!grad_) {
    grad_ = g;
  } else {
    *grad_ += g;
  }
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  return nodes_[v.id_];
}

Tape::Node& Tape::node(const Var& v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  return nodes_[v.id_];
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Array value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Array value, bool requires_grad) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.needs_grad = grad_enabled_ && requires_grad;
  return push(std::move(n));
}

Var Tape::bind(Tensor& tensor) {
  Node n;
  n.op = "param";
  n.value = tensor.data();
  n.needs_grad = grad_enabled_ && tensor.requires_grad();
  n.bound = n.needs_grad ? &tensor : nullptr;
  return push(std::move(n));
}

Var Tape::record(const char* op, Array value, std::initializer_list<Var> inputs, BackwardFn backward) {
  if (!all_finite(value)) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.valid() && node(in).needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Array* Tape::grad_sink(const Var& v) {
  Node& n = node(v);
  if (!n.needs_grad) return nullptr;
  if (!n.grad) n.grad = Array(n.value.shape());
  return &*n.grad;
}

Array Tape::grad(const Var& v) const {
  const Node& n = node(v);
  return n.grad ? *n.grad : Array(n.value.shape());
}

void Tape::backward(const Var& loss) {
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(root.value.shape()));
  }
  if (!root.needs_grad) return;
  root.grad = Array(root.value.shape(), 1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.grad) continue;
    if (n.backward) n.backward(*this, *n.grad);
    if (n.bound != nullptr) n.bound->accumulate_grad(*n.grad);
  }
}

}  // namespace hiri
