#pragma once

// Dense row-major tensor with define-by-run reverse-mode differentiation.
//
// A Tensor is a handle: copies share the same underlying node. Operations in
// ops.hpp create new nodes and, when any input requires a gradient and grad
// mode is enabled, link the result to its inputs together with a backward
// closure. backward() orders the reachable nodes topologically (the Tape) and
// runs the closures in reverse.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "topodiff/errors.hpp"

namespace topodiff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Thread-local switch; when disabled no operation records onto a tape.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Only leaves may be written; nodes produced by operations are immutable.
  std::span<T> mutable_data() {
    if (!node_->is_leaf) throw ContractError("cannot mutate a non-leaf tensor in place");
    return node_->data;
  }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Copy of the values with no tape history.
  Tensor detach() const { return from_data(shape(), node_->data, false); }

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Reachable differentiable nodes in topological order: every node appears
// after all of its producers.
template <typename T>
struct Tape {
  std::vector<std::shared_ptr<detail::Node<T>>> order;

  std::size_t size() const { return order.size(); }
};

template <typename T>
Tape<T> build_tape(const Tensor<T>& root) {
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  Tape<T> tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  std::unordered_set<const detail::Node<T>*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      tape.order.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

// Populates gradients of every tensor requiring one. Leaf gradients
// accumulate across calls; intermediate gradients are recomputed.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tape<T> tape = build_tape(loss);
  for (auto& node : tape.order) {
    if (!node->is_leaf) node->grad.assign(node->data.size(), T(0));
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace detail {

// Builds the result node of an operation and links it when gradients are live.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      std::function<void(Node<T>&)> bw) {
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data), false);
  bool live = false;
  if (GradMode::enabled()) {
    for (const Tensor<T>* in : inputs) live = live || (in->defined() && in->requires_grad());
  }
  auto& node = *out.node();
  node.is_leaf = false;
  node.op = op;
  if (live) {
    node.requires_grad = true;
    for (const Tensor<T>* in : inputs) {
      if (in->defined()) node.parents.push_back(in->node());
    }
    node.backward = std::move(bw);
  }
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op, std::function<void(Node<T>&)> bw) {
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data), false);
  bool live = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) live = live || in.requires_grad();
  }
  auto& node = *out.node();
  node.is_leaf = false;
  node.op = op;
  if (live) {
    node.requires_grad = true;
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward = std::move(bw);
  }
  return out;
}

}  // namespace detail

}  // namespace topodiff
