#include "gbe/autograd.hpp"

#include <unordered_set>

namespace gbe {
namespace {

thread_local bool g_grad_enabled = true;
// When set, leaf accumulation is restricted to this node (see gradient()).
thread_local const Node* g_only_leaf = nullptr;

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children before parents
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor& Var::mutable_value() {
  if (!node_->is_leaf()) throw std::logic_error("mutable_value on interior node");
  return node_->value;
}

const Tensor& Var::grad() const { return grad_buffer(*node_); }

Tensor& Var::mutable_grad() { return grad_buffer(*node_); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward = std::move(backward);
  }
  return Var::from_node(std::move(node));
}

Tensor& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

bool needs_grad(const Node& n) {
  return n.requires_grad && !(n.is_leaf() && g_only_leaf != nullptr && &n != g_only_leaf);
}

void accumulate_grad(Node& n, const Tensor& g) {
  if (!needs_grad(n)) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError("gradient shape " + g.shape().str() + " vs value " + n.value.shape().str());
  }
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void backward(const Var& root, const Tensor* seed) {
  Node* r = root.node();
  if (!r->requires_grad) return;
  const auto order = topo_order(r);
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Tensor();
  }
  Tensor s = seed ? *seed : Tensor(r->value.shape(), 1.0);
  if (r->is_leaf()) {
    accumulate_grad(*r, s);
    return;
  }
  r->grad = std::move(s);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
    n->grad = Tensor();  // interior gradients are transient
  }
}

Tensor gradient(const Var& root, const Var& wrt) {
  Node* target = wrt.node();
  Tensor saved = std::move(target->grad);
  target->grad = Tensor();
  const Node* prev = g_only_leaf;
  g_only_leaf = target;
  try {
    backward(root);
  } catch (...) {
    g_only_leaf = prev;
    target->grad = std::move(saved);
    throw;
  }
  g_only_leaf = prev;
  Tensor out = target->grad.empty() ? Tensor(target->value.shape()) : std::move(target->grad);
  target->grad = std::move(saved);
  return out;
}

Var detach(const Var& v) { return Var(v.value(), false); }

}  // namespace gbe
