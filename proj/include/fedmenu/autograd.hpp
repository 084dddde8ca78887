#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "fedmenu/tensor.hpp"

namespace fedmenu {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
  /// Accumulated gradient; zeros if nothing flowed into this node.
  Tensor grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations in execution order and replays them backward.
///
/// A node requires a gradient when it is a trainable leaf or when any of its
/// inputs does. Nodes that do not require a gradient keep no backward closure,
/// so frozen sub-networks cost nothing on the reverse pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an operation output. `backward` is dropped when no input requires a gradient.
  /// Throws NumericError if `value` holds NaN/Inf.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward closure in reverse order.
  void backward(const Var& root);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient accumulator of node `id`, allocated as zeros on first use.
  Tensor& grad(std::size_t id);

  /// Node ids whose backward closures ran during the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_trace() const noexcept { return trace_; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(const char* op, Tensor value, bool requires_grad, BackwardFn backward);

  std::vector<Node> nodes_;
  std::vector<std::size_t> trace_;
};

}  // namespace fedmenu
