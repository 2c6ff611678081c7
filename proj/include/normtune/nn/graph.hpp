#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "normtune/nn/parameters.hpp"
#include "normtune/nn/tensor.hpp"

namespace normtune::nn {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

// Reverse-mode tape over whole tensors. Nodes are appended in evaluation
// order, so walking them backwards is a valid topological order.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to `p`; backward() accumulates into p.grad. Repeated calls
  // with the same parameter return the same node.
  Var parameter(Parameter& p) {
    if (const auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, {}, {}, &p, grad_enabled_});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, zero-initialised on first access.
  Tensor& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  Tensor& grad(Var v) { return grad(v.id); }

  bool any_requires_grad(std::initializer_list<Var> inputs) const {
    if (!grad_enabled_) return false;
    for (const auto& v : inputs) {
      if (nodes_[v.id].requires_grad) return true;
    }
    return false;
  }

  // Appends an op result. `fn` runs during backward() with this node's id and
  // may read grad(id) to push gradients into its inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn, const char* op) {
    require_finite(value, op);
    const bool needs = any_requires_grad(inputs);
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  void backward(Var root) {
    if (value(root).size() != 1) throw InvalidArgument("backward() needs a scalar root");
    if (!requires_grad(root)) return;
    grad(root)[0] += 1.0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
        n.param->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param;
    bool requires_grad;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

}  // namespace normtune::nn
