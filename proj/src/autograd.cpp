#include "fedmenu/autograd.hpp"

#include "fedmenu/errors.hpp"

namespace fedmenu {

const Tensor& Var::value() const { return tape_->value(id_); }

const Shape& Var::shape() const { return tape_->value(id_).shape(); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Var::grad() const {
  if (tape_->has_grad(id_)) return tape_->grad(id_);
  return Tensor(value().shape(), 0.0);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf tensor holds non-finite values");
  return push("leaf", std::move(value), requires_grad, nullptr);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw Error(std::string(op) + ": operand recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  if (!value.all_finite()) throw NumericError(std::string(op) + " produced non-finite values");
  return push(op, std::move(value), needs, needs ? std::move(backward) : nullptr);
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw Error(std::string(op) + ": operand recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  if (!value.all_finite()) throw NumericError(std::string(op) + " produced non-finite values");
  return push(op, std::move(value), needs, needs ? std::move(backward) : nullptr);
}

Var Tape::push(const char* op, Tensor value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(Node{op, std::move(value), Tensor{}, requires_grad, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (&root.tape() != this) throw Error("backward: root belongs to a different tape");
  if (root.value().size() != 1) {
    throw DimensionError("backward root must be a scalar, got " + shape_string(root.shape()));
  }
  trace_.clear();
  grad(root.id())[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    trace_.push_back(i);
    n.backward(*this, i);
  }
}

}  // namespace fedmenu
