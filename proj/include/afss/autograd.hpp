#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "afss/tensor.hpp"

namespace afss {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a value on the differentiation tape. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var leaf(Tensor<T> value, bool requires_grad) { return Var(std::move(value), requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

  // Reverse sweep seeded with ones (a scalar loss gets d loss / d loss = 1).
  void backward() const {
    node_->grad_buffer().fill(T(1));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS; deep encoders would overflow a recursive walk on long tapes
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
  }

  // Drops the recorded history so intermediate buffers can be released.
  void detach_inplace() {
    node_->parents.clear();
    node_->backward_fn = nullptr;
  }

  Var detached() const { return constant(node_->value); }

 private:
  Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node<T>> node_;

  template <typename U, typename F>
  friend Var<U> make_var(Tensor<U> value, std::vector<Var<U>> parents, F&& backward);
};

// Records an op result. When no parent needs a gradient the result is a plain
// constant and the closure is dropped.
template <typename T, typename F>
Var<T> make_var(Tensor<T> value, std::vector<Var<T>> parents, F&& backward) {
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  Var<T> out(std::move(value), any);
  if (any) {
    for (auto& p : parents) out.node_->parents.push_back(p.shared());
    out.node_->backward_fn = std::forward<F>(backward);
  }
  return out;
}

template <typename T>
void accumulate(Node<T>& target, const Tensor<T>& delta) {
  auto& g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// A named, freezable model weight. Frozen parameters never enter an optimizer.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> init) : name(std::move(n)), var(Var<T>::leaf(std::move(init), true)) {}

  // Copies are deep: a copied parameter owns a fresh leaf with the same value.
  Parameter(const Parameter& o) : name(o.name), var(clone_leaf(o)), frozen(o.frozen) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) {
      name = o.name;
      var = clone_leaf(o);
      frozen = o.frozen;
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  void freeze(bool on = true) {
    frozen = on;
    var.set_requires_grad(!on);
  }
  std::size_t numel() const { return var.value().size(); }
  const Tensor<T>& value() const { return var.value(); }
  Tensor<T>& mutable_value() { return var.mutable_value(); }

 private:
  static Var<T> clone_leaf(const Parameter& o) {
    if (!o.var.defined()) return Var<T>();
    return Var<T>::leaf(o.var.value(), !o.frozen);
  }
};

template <typename T>
using ParameterRefs = std::vector<Parameter<T>*>;

template <typename T>
std::size_t count_parameters(const ParameterRefs<T>& params, bool trainable_only) {
  std::size_t n = 0;
  for (const auto* p : params) {
    if (!trainable_only || !p->frozen) n += p->numel();
  }
  return n;
}

}  // namespace afss
