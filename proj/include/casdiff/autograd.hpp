#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "casdiff/tensor.hpp"

namespace casdiff {

template <typename T>
struct Node;

/// Handle to a value in the computation graph.
template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Global switch for graph recording on the current thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  return node;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

/// Builds an op result. Parents and the backward closure are only retained
/// when recording is on and some parent needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (!grad_enabled()) return node;
  bool any = false;
  for (const auto& p : parents) any = any || (p && p->requires_grad);
  if (!any) return node;
  node->requires_grad = true;
  node->parents = std::move(parents);
  node->backward = std::move(backward);
  return node;
}

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires them.
template <typename T>
void backward(const Var<T>& root);

}  // namespace casdiff
