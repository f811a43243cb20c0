#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cntl/tensor.hpp"

namespace cntl {

// Reverse-mode differentiation over a dynamically recorded graph. Each op
// produces a Node holding its value and, when any input requires a gradient,
// a closure that pushes the node's gradient to its parents.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return !grad.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    auto& buf = grad_buffer();
    T* dst = buf.data();
    const T* src = g.data();
    for (std::size_t i = 0, n = buf.size(); i < n; ++i) dst[i] += src[i];
  }

  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::uint64_t*& mac_counter_slot() {
  thread_local std::uint64_t* slot = nullptr;
  return slot;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Counts multiply-accumulates issued by ops on this thread while alive.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_counter_slot()) { detail::mac_counter_slot() = &count_; }
  ~MacCounter() { detail::mac_counter_slot() = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void add_macs(std::uint64_t n) {
  if (auto* slot = detail::mac_counter_slot()) *slot += n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

// A trainable leaf.
template <typename T>
Var<T> leaf(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

// Creates the output node of an op. The closure is attached only if some
// parent requires a gradient and recording is enabled.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!grad_enabled()) return n;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return n;
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward_fn = std::move(backward);
  return n;
}

// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
template <typename T>
void backward(const Var<T>& root) {
  if (!root->requires_grad) return;
  std::vector<Var<T>> order;
  std::unordered_set<Node<T>*> seen{root.get()};
  std::vector<std::pair<Var<T>, std::size_t>> stack{{root, 0}};
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      Var<T> p = top.first->parents[top.second++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  root->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && n.has_grad()) n.backward_fn(n);
  }
  // Interior state is released so the recorded graph can be freed; leaves
  // keep their gradients.
  for (auto& n : order) {
    if (!n->backward_fn) continue;
    n->grad = Tensor<T>();
    n->backward_fn = nullptr;
    n->parents.clear();
  }
}

}  // namespace cntl
