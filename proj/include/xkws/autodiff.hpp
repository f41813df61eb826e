// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation. A Graph records every node created
// during a forward computation in creation order, which is already a
// topological order, so backward() is a single reverse sweep.
#pragma once

#include "xkws/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace xkws {

// Trainable tensor plus its Adam state. Moments start at zero.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor init);

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  std::int64_t step_count = 0;
  bool requires_grad = true;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient after Graph::backward(); zero-sized if the node was unreached.
  const Tensor& grad() const;
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  // Receives the node's output and its gradient; pushes into inputs via grad_of().
  using BackwardFn = std::function<void(Graph&, const Tensor& out, const Tensor& out_grad)>;

  // With track_grad=false parameters enter as constants and no backward
  // closures are kept.
  explicit Graph(bool track_grad = true) : track_grad_(track_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Leaf bound to `param`; backward() adds into param.grad when it requires
  // grad. Repeated calls with the same parameter return the same node.
  Var param(Parameter& param);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(Var v) const { return nodes_[v.id_].current(); }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  const Tensor& grad(Var v) const { return nodes_[v.id_].grad; }
  // Mutable gradient buffer of an input, zero-initialised on first use.
  Tensor& grad_of(Var v);

  // Reverse sweep from a single-element node. Node gradients are rebuilt on
  // every call; Parameter gradients accumulate across calls.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    // Parameter leaves read the parameter in place instead of copying it;
    // the parameter must not change while the graph is in use.
    const Tensor& current() const { return param != nullptr ? param->value : value; }

    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool track_grad_ = true;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

}  // namespace xkws
