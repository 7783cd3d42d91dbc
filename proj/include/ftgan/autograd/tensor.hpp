#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A Tensor is a cheap handle to a graph node; ops record a
// backward closure when grad mode is on and at least one input requires
// gradients.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ftgan/core/error.hpp"

namespace ftgan::ag {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
struct Node {
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Thread-local switch controlling whether ops record the graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    FTGAN_EXPECTS(static_cast<std::int64_t>(values.size()) == ag::numel(shape), "tensor data size ", values.size(),
                  " does not match shape ", to_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(ag::numel(shape));
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(ag::numel(shape));
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  /// Size of dimension `i`; negative indices count from the back.
  std::int64_t dim(int i) const {
    const int r = static_cast<int>(rank());
    if (i < 0) i += r;
    FTGAN_EXPECTS(i >= 0 && i < r, "dimension index out of range for shape ", to_string(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access. Only meaningful for leaves (parameters, buffers).
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    FTGAN_EXPECTS(node_->value.size() == 1, "item() needs a single-element tensor, got ", to_string(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  /// New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Independent leaf copy that keeps the requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->value, node_->requires_grad); }

  const char* op() const { return node_->op; }
  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Build the result node of an op. The backward closure receives the result
/// node and must accumulate into its inputs' gradients. It is dropped when
/// no input participates in differentiation.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      const char* op, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (GradMode::enabled()) {
    for (const auto* in : inputs) {
      if (in->defined() && in->requires_grad()) {
        node->requires_grad = true;
        node->parents.push_back(in->node_ptr());
      }
    }
    if (node->requires_grad) node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Variant of make_result taking a runtime list of inputs.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        node->requires_grad = true;
        node->parents.push_back(in.node_ptr());
      }
    }
    if (node->requires_grad) node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// True when gradients should be accumulated into `t`.
template <class T>
inline bool wants_grad(const std::shared_ptr<Node<T>>& t) {
  return t && t->requires_grad;
}

/// Reverse pass from a single-element `root`. Leaf gradients accumulate;
/// intermediate gradients are reset first. Unless `retain_graph`, the
/// recorded closures are released afterwards.
template <class T>
void backward(const Tensor<T>& root, bool retain_graph = false) {
  FTGAN_EXPECTS(root.numel() == 1, "backward() needs a scalar root, got ", to_string(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS to get a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
  }
  if (!retain_graph) {
    for (auto* n : order) {
      if (!n->is_leaf()) {
        n->backward = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }
}

}  // namespace ftgan::ag
