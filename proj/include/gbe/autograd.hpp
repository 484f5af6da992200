#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Leaves are created directly;
// interior nodes are created by the ops in ops.hpp and keep their inputs alive
// until the last handle to the output is dropped.

#include <functional>
#include <memory>
#include <vector>

#include "gbe/tensor.hpp"

namespace gbe {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // reads `grad`, accumulates into inputs

  [[nodiscard]] bool is_leaf() const { return !backward; }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  [[nodiscard]] const Tensor& value() const { return node_->value; }
  /// In-place access for optimisers and checkpoint loading. Only valid on leaves.
  [[nodiscard]] Tensor& mutable_value();
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; zeros of the value's shape if nothing flowed yet.
  [[nodiscard]] const Tensor& grad() const;
  [[nodiscard]] Tensor& mutable_grad();
  void zero_grad() { node_->grad = Tensor(); }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  [[nodiscard]] Node* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  static Var from_node(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction in its scope (inference, frozen networks).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

[[nodiscard]] bool grad_enabled();

/// Builds an interior node. The backward callback receives the node whose
/// `grad` holds dL/d(value); it is dropped when no input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// True when a gradient flowing into `n` would be kept (see gradient()).
[[nodiscard]] bool needs_grad(const Node& n);

/// Adds `g` into the gradient of `n` if it participates in differentiation.
void accumulate_grad(Node& n, const Tensor& g);
/// Gradient buffer of `n`, allocated as zeros on first use.
Tensor& grad_buffer(Node& n);

/// Back-propagates from `root` with seed `seed` (ones when omitted) and
/// accumulates into every leaf that requires a gradient.
void backward(const Var& root, const Tensor* seed = nullptr);

/// d(sum(root))/d(wrt) without touching the gradients stored in any leaf.
[[nodiscard]] Tensor gradient(const Var& root, const Var& wrt);

/// Same value, no history.
[[nodiscard]] Var detach(const Var& v);

}  // namespace gbe
