#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <utility>
#include <vector>

#include "hmil/error.hpp"
#include "hmil/nn/tensor.hpp"

namespace hmil::nn {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;

  bool valid() const noexcept { return id != npos; }
};

/// Linear record of forward operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and a single reverse sweep visits every node once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf whose gradient is collected by backward().
  Var variable(Tensor value) { return push(std::move(value), true, {}); }

  /// Appends an op result. `backward` receives the gradient w.r.t. the
  /// result and accumulates into its inputs through grad_accumulator().
  /// It is dropped when no input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor& value(Var v) const { return node(v).value; }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() target w.r.t. `v`; zeros when `v` did
  /// not influence it.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor(n.value.rows(), n.value.cols());
  }

  /// Mutable gradient slot, allocated on first touch. Only valid during
  /// backward().
  Tensor& grad_accumulator(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    const Node& target = node(loss);
    if (target.value.rows() != 1 || target.value.cols() != 1) {
      throw ContractError("backward requires a scalar loss, got " + target.value.shape());
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad_accumulator(loss)(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, false, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

}  // namespace hmil::nn
