#include "casdiff/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace casdiff {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& root) {
  if (!root || !root->requires_grad) return;

  // Iterative post-order DFS yields a topological order (parents first).
  std::vector<Var<T>> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Var<T>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Var<T>& parent = node->parents[next++];
      if (parent && parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& node = **it;
    if (!node.backward) continue;
    if (!node.grad.empty()) node.backward(node);
    // Interior nodes are done: drop saved activations and gradients early.
    node.backward = nullptr;
    node.grad = Tensor<T>();
  }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace casdiff
