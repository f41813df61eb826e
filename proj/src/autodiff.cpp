// SPDX-License-Identifier: Apache-2.0
#include "xkws/autodiff.hpp"

#include "xkws/errors.hpp"

#include <algorithm>

namespace xkws {

Parameter::Parameter(std::string name_, Tensor init)
    : name(std::move(name_)),
      value(std::move(init)),
      grad(value.shape()),
      adam_m(value.shape()),
      adam_v(value.shape()) {}

const Tensor& Var::value() const { return graph_->value(*this); }
const Tensor& Var::grad() const { return graph_->grad(*this); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Graph::param(Parameter& p) {
  if (const auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  param_nodes_[&p] = nodes_.size();
  Node node;
  node.param = &p;
  node.requires_grad = p.requires_grad && track_grad_;
  return push(std::move(node));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](Var v) {
    return v.graph_ == this && nodes_[v.id_].requires_grad;
  });
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

Tensor& Graph::grad_of(Var v) {
  Node& node = nodes_[v.id_];
  if (node.grad.shape() != node.current().shape()) node.grad = Tensor(node.current().shape());
  return node.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph_ != this) throw InvalidArgument("backward: variable belongs to another graph");
  if (nodes_[loss.id_].current().size() != 1) {
    throw InvalidArgument("backward: loss must be a scalar, got shape " +
                          shape_str(nodes_[loss.id_].current().shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor();
  if (!nodes_[loss.id_].requires_grad) return;
  grad_of(loss)[0] = 1.0;

  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      p.grad.vec() += node.grad.vec();
      continue;
    }
    if (node.backward) {
      // grad_of() never resizes nodes_, so this reference stays valid.
      node.backward(*this, node.value, node.grad);
    }
  }
}

}  // namespace xkws
