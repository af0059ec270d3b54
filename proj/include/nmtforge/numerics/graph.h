// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nmtforge/numerics/tensor.h"

namespace nmtforge {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  int id() const { return id_; }
  Graph& graph() const { return *graph_; }
  const Tensor& value() const;
  int64_t rows() const { return value().rows(); }
  int64_t cols() const { return value().cols(); }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, which is therefore a topological order; backward() walks it in
// reverse and calls each node's gradient rule once.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf that receives a gradient (owned copy).
  Var variable(Tensor value);
  // Leaf bound by reference to an external parameter tensor. Binding the same
  // name twice returns the same node so gradients accumulate in one place.
  // The referenced tensor must outlive the graph.
  Var param(const std::string& name, const Tensor& value);

  // Appends an op node. The backward rule is dropped when no input requires a
  // gradient or gradients are disabled. Throws NumericError on non-finite output.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op);

  const Tensor& value(int id) const;
  const Tensor& value(Var v) const { return value(v.id()); }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }
  const std::vector<int>& inputs(int id) const { return nodes_[static_cast<size_t>(id)].inputs; }
  // Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad_ready; }
  // Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor grad_of(Var v) const;

  // Runs the reverse sweep from a single-element loss node.
  void backward(Var loss);

  // Gradients of every bound parameter, keyed by name.
  ParameterStore param_grads() const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    std::vector<int> inputs;
    BackwardFn backward;
    Tensor grad;
    bool grad_ready = false;
    bool requires_grad = false;
    const char* op = "";
  };

  Var push(Node node);

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<std::string, int> params_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

}  // namespace nmtforge
