// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode differentiation over tensors. Every op result keeps
// shared pointers to its inputs and a closure that pushes its gradient back.
// Graphs are only recorded when some input requires a gradient, so inference
// allocates no closures.

#pragma once

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "morphdiff/tensor.hpp"

namespace morphdiff::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.data.size(), T{0});
    return grad.data();
  }
  bool has_grad() const { return !grad.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape; }
  Index dim(int i) const { return node_->value.dim(i); }
  Index size() const { return node_->value.size(); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const T* data() const { return node_->value.data.data(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Empty until a backward pass reaches this node.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op result. The caller fills the value and, when the result
/// requires a gradient, installs `backward_fn`.
template <typename T>
std::shared_ptr<Node<T>> make_result(Shape shape, std::initializer_list<const Var<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->value = Tensor<T>(std::move(shape));
  for (const Var<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Var<T>* in : inputs) {
      if (in && in->defined()) n->parents.push_back(in->shared());
    }
  }
  return n;
}

/// Accumulates d(root)/d(node) into every reachable node that requires a gradient.
/// `root` must be a scalar unless `seed` is given.
template <typename T>
void backward(const Var<T>& root, std::span<const T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  T* g = root.node()->grad_data();
  if (seed.empty()) {
    if (root.size() != 1) throw ConfigError("backward from a non-scalar requires a seed gradient");
    g[0] += T{1};
  } else {
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn();
  }
}

/// Named trainable parameters in registration order.
template <typename T>
class ParamSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    for (const auto& [n, v] : entries_) {
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    }
    auto v = Var<T>::parameter(std::move(init));
    entries_.emplace_back(name, v);
    return v;
  }

  std::vector<std::pair<std::string, Var<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

  const Var<T>* find(const std::string& name) const {
    for (const auto& [n, v] : entries_) {
      if (n == name) return &v;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& [n, v] : entries_) v.zero_grad();
  }

  Index total_size() const {
    Index s = 0;
    for (const auto& [n, v] : entries_) s += v.size();
    return s;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
};

}  // namespace morphdiff::ad
