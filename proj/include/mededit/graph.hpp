// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mededit/error.hpp"
#include "mededit/tensor.hpp"

namespace mededit {

// Define-by-run reverse-mode tape. Operations (ops.hpp) append nodes in
// execution order, which is a topological order by construction; backward()
// replays the recorded closures in reverse over the subgraph that reaches
// the seed. A graph is rebuilt per forward pass and is single-threaded.
template <typename Scalar>
class GraphT {
 public:
  using Id = std::int32_t;
  static constexpr Id kNone = -1;

  /// Leaf holding its own value.
  Id input(TensorT<Scalar> value) {
    return push(Node{std::move(value), nullptr, {}, nullptr, "input"});
  }

  /// Leaf borrowing an external tensor (e.g. a checkpoint weight). The
  /// tensor must stay alive and unmodified for the lifetime of the graph.
  Id input_ref(const TensorT<Scalar>* value) {
    if (value == nullptr) throw ContractError("input_ref: null tensor");
    return push(Node{TensorT<Scalar>{}, value, {}, nullptr, "input"});
  }

  /// Records an operation node. `backprop` accumulates into input grads via
  /// grad_acc(); it may be empty for non-differentiable ops.
  Id add_op(const char* name, TensorT<Scalar> value, std::vector<Id> inputs,
            std::function<void(GraphT&)> backprop) {
    if (!value.all_finite()) {
      throw NumericError(std::string(name) + ": non-finite value in result");
    }
    for (Id in : inputs) check_id(in);
    return push(Node{std::move(value), nullptr, std::move(inputs), std::move(backprop), name});
  }

  const TensorT<Scalar>& value(Id id) const {
    check_id(id);
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.owned;
  }

  bool has_grad(Id id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].grad_set;
  }

  /// Adjoint of a node; valid after backward() for nodes on a path to the seed.
  const TensorT<Scalar>& grad(Id id) const {
    check_id(id);
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_set) {
      throw ContractError("grad: node " + std::to_string(id) +
                          " has no adjoint (run backward on a seed it reaches)");
    }
    return n.grad;
  }

  /// Adjoint buffer for accumulation during backward; zero-initialized.
  TensorT<Scalar>& grad_acc(Id id) {
    check_id(id);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_set) {
      n.grad = TensorT<Scalar>(value(id).shape());
      n.grad_set = true;
    }
    return n.grad;
  }

  // Populates adjoints of every node with a path to `seed`. The seed must be
  // scalar-valued. Adjoints are recomputed from scratch on every call, so
  // repeated calls with the same seed are idempotent.
  void backward(Id seed) {
    check_id(seed);
    if (!value(seed).is_scalar()) {
      throw ContractError("backward: seed node must be scalar, got shape " +
                          shape_str(value(seed).shape()));
    }
    for (Node& n : nodes_) {
      n.grad_set = false;
      n.reachable = false;
    }
    // Mark ancestors of the seed.
    std::vector<Id> stack{seed};
    nodes_[static_cast<std::size_t>(seed)].reachable = true;
    while (!stack.empty()) {
      const Id id = stack.back();
      stack.pop_back();
      for (Id in : nodes_[static_cast<std::size_t>(id)].inputs) {
        Node& n = nodes_[static_cast<std::size_t>(in)];
        if (!n.reachable) {
          n.reachable = true;
          stack.push_back(in);
        }
      }
    }
    grad_acc(seed)[0] = Scalar(1);
    for (Id id = seed; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.reachable) continue;
      grad_acc(id);  // nodes on a path to the seed always end with an adjoint
      if (n.backprop) n.backprop(*this);
    }
    for (const Node& n : nodes_) {
      if (n.grad_set && !n.grad.all_finite()) {
        throw NumericError(std::string("backward: non-finite adjoint at ") + n.name + " node");
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT<Scalar> owned;
    const TensorT<Scalar>* ref = nullptr;
    std::vector<Id> inputs;
    std::function<void(GraphT&)> backprop;
    const char* name = "";
    TensorT<Scalar> grad;
    bool grad_set = false;
    bool reachable = false;
  };

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  void check_id(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw ContractError("invalid graph node id " + std::to_string(id));
    }
  }

  std::vector<Node> nodes_;
};

using Graph = GraphT<float>;

}  // namespace mededit
