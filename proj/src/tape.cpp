#include "tpt/tape.hpp"

#include "tpt/errors.hpp"

namespace tpt {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.is_leaf = true;
  n.op = "constant";
  return push(std::move(n));
}

Var Tape::leaf(Tensor value, std::string name, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  n.name = std::move(name);
  n.op = "leaf";
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value, std::string name, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  n.name = std::move(name);
  n.op = "parameter";
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, const char* op) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward), op);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericalError(std::string(op) + " produced a non-finite value");
  Node n;
  n.owned = std::move(value);
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError(std::string(op) + ": operands live on different tapes");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.owned;
}

RowMatrix* Tape::grad_sink(int id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    const Tensor& v = value(id);
    n.grad = RowMatrix::Zero(v.rows(), v.cols());
    n.has_grad = true;
  }
  return &n.grad;
}

std::map<std::string, Tensor> Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  if (RowMatrix* seed = grad_sink(loss.id())) (*seed)(0, 0) = 1.0;

  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    // The closure may grow other nodes' grads but never this one.
    n.backward(*this, n.grad);
  }

  std::map<std::string, Tensor> grads;
  for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
    const Node& n = nodes_[id];
    if (!n.is_leaf || !n.requires_grad || n.name.empty()) continue;
    grads.insert_or_assign(n.name, grad(Var(this, id)));
  }
  return grads;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  const Tensor& value = this->value(v.id());
  if (!n.has_grad) return Tensor::zeros(value.shape());
  return Tensor(value.shape(), n.grad);
}

}  // namespace tpt
