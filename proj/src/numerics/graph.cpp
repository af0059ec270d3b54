// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/numerics/graph.h"

#include "nmtforge/errors.h"

namespace nmtforge {

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  node.op = "constant";
  return push(std::move(node));
}

Var Graph::variable(Tensor value) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = grad_enabled_;
  node.op = "variable";
  return push(std::move(node));
}

Var Graph::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return Var(this, it->second);
  Node node;
  node.ref = &value;
  node.requires_grad = grad_enabled_;
  node.op = "param";
  Var v = push(std::move(node));
  params_.emplace(name, v.id());
  return v;
}

Var Graph::record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
  Node node;
  node.owned = std::move(value);
  node.op = op;
  if (grad_enabled_) {
    for (int id : inputs) {
      if (nodes_[static_cast<size_t>(id)].requires_grad) {
        node.requires_grad = true;
        break;
      }
    }
  }
  if (node.requires_grad) {
    node.backward = std::move(backward);
    node.inputs = std::move(inputs);
  }
  return push(std::move(node));
}

const Tensor& Graph::value(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.ref ? *n.ref : n.owned;
}

Tensor& Graph::grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_ready) {
    n.grad = Tensor(value(id).shape());
    n.grad_ready = true;
  }
  return n.grad;
}

Tensor Graph::grad_of(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.id())];
  if (n.grad_ready) return n.grad;
  return Tensor(value(v.id()).shape());
}

void Graph::backward(Var loss) {
  if (loss.graph_ != this) throw StateError("loss belongs to another graph");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(value(loss.id()).shape()));
  }
  if (!requires_grad(loss.id())) return;
  grad(loss.id())[0] += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad_ready && n.backward) n.backward(*this, id);
  }
}

ParameterStore Graph::param_grads() const {
  ParameterStore out;
  for (const auto& [name, id] : params_) out.emplace(name, grad_of(Var(const_cast<Graph*>(this), id)));
  return out;
}

}  // namespace nmtforge
