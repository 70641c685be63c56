#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace bornovit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Thread-local switch for graph recording. When disabled, ops produce plain
/// values with no parents, which is what eval-mode inference wants.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same node, so the optimizer
/// can update parameters in place through any handle. Use clone() for a deep
/// copy. Values produced by ops are never mutated afterwards; only leaf
/// parameters are written (by initializers and optimizers).
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
  using BackwardFn = std::function<void(const Storage& grad_out)>;

  struct Node {
    Shape shape;
    Storage data;
    Storage grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
    const char* op = "leaf";
  };

  Tensor() = default;
  Tensor(Shape shape, Storage data, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<S> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor scalar(S value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Size of axis i; negative i counts from the end.
  Index dim(int i) const;
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  const Storage& data() const { return node_->data; }
  /// In-place write access. Only valid for leaves outside any live graph.
  Storage& mutable_data() { return node_->data; }
  S item() const;
  S at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad.size() > 0; }
  const Storage& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  /// Deep copy as a fresh leaf, keeping requires_grad.
  Tensor clone() const;
  /// Deep copy as a fresh leaf that does not track gradients.
  Tensor detach() const;
  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape(), data().template cast<T>(), requires_grad());
  }

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an op result. Parents are recorded only if grad mode is on and
  /// some input requires grad; the caller then attaches a backward closure.
  static Tensor from_op(Shape shape, Storage data, std::initializer_list<Tensor> inputs,
                        const char* op);
  static Tensor from_op(Shape shape, Storage data, const std::vector<Tensor>& inputs,
                        const char* op);
  void set_backward(BackwardFn fn) { node_->backward = std::move(fn); }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// node.grad += contribution, allocating on first use. No-op for untracked nodes.
template <typename S, typename Expr>
void accumulate(typename Tensor<S>::Node& node, const Expr& contribution) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = contribution;
  } else {
    node.grad += contribution;
  }
}

}  // namespace detail

/// Topologically ordered record of the operations reachable from a root.
template <typename S>
class ComputationTape {
 public:
  using Node = typename Tensor<S>::Node;

  static ComputationTape record(const Tensor<S>& root);

  /// Nodes in execution order: every node's parents precede it.
  const std::vector<Node*>& order() const { return order_; }

  /// Seeds root.grad with ones and visits each node once in reverse order.
  void run_backward();

 private:
  std::vector<Node*> order_;
};

/// Populates grad on every tracked tensor feeding `loss`. Gradients
/// accumulate across calls until zero_grad().
template <typename S>
void backward(const Tensor<S>& loss);

}  // namespace bornovit
