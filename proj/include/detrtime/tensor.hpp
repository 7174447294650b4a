#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "detrtime/common.hpp"

namespace detrtime {

// Reverse-mode autodiff over dense 64-bit arrays. A Tensor is a handle to a
// graph node; ops build fresh nodes, backward() walks the recorded graph in
// reverse topological order exactly once per node. A graph is single-owner:
// one training step builds and consumes one graph.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value once touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  double item() const {
    if (node_->numel() != 1) {
      throw NotScalarError("item(): tensor of shape " + shape_str(node_->shape) +
                           " is not scalar");
    }
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Collects the subgraph reachable from `root` in topological order
// (parents before children) without recursion.
inline std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  // explicit DFS stack: (node, next-parent-index)
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx].get();
      ++idx;
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents precede children
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every requires_grad leaf. Repeated calls
// without zero_grad accumulate.
inline void backward(const Tensor& loss) {
  TensorNode* root = loss.node().get();
  if (root->numel() != 1) {
    throw NotScalarError("backward: loss has shape " + shape_str(root->shape) +
                         " (" + std::to_string(root->numel()) + " elements)");
  }
  if (!root->requires_grad) return;  // constant: nothing depends on parameters
  auto order = detail::topo_order(root);
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && n->requires_grad) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

namespace detail {

inline NodePtr make_op(Shape shape, std::vector<double> value,
                       std::vector<NodePtr> parents,
                       std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

inline void add_into(TensorNode* dst, const std::vector<double>& g) {
  dst->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst->grad[i] += g[i];
}

}  // namespace detail

}  // namespace detrtime
