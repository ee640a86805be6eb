#pragma once

#include "attmil/rng.hpp"
#include "attmil/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace attmil {

class Node;

/// Local vector-Jacobian product. Reads `self.grad()` and accumulates into the
/// gradients of `self.parents()`.
using BackwardFn = std::function<void(Node& self)>;

/// One vertex of the reverse-mode graph. Owned through `Var` handles; parents
/// are held by shared_ptr so a graph lives exactly as long as its outputs.
class Node {
 public:
  Node(std::string op, Tensor value, std::vector<std::shared_ptr<Node>> parents,
       BackwardFn backward, bool requires_grad);

  const std::string& op() const noexcept { return op_; }
  const Tensor& value() const noexcept { return value_; }
  Tensor& mutable_value() noexcept { return value_; }
  const std::vector<std::shared_ptr<Node>>& parents() const noexcept { return parents_; }
  bool requires_grad() const noexcept { return requires_grad_; }
  bool is_leaf() const noexcept { return !backward_; }
  std::uint64_t order() const noexcept { return order_; }

  /// Gradient buffer; zero-filled with the value's shape on first touch.
  Tensor& grad();
  bool has_grad() const noexcept { return grad_.numel() != 0; }
  void zero_grad();

  void run_backward() {
    if (backward_) backward_(*this);
  }

 private:
  std::string op_;
  Tensor value_;
  Tensor grad_;
  std::vector<std::shared_ptr<Node>> parents_;
  BackwardFn backward_;
  bool requires_grad_;
  std::uint64_t order_;
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Trainable leaf (gradients are accumulated into it).
  static Var parameter(Tensor value);
  /// Leaf that never receives gradient, e.g. input data.
  static Var constant(Tensor value);

  const Tensor& value() const { return node_->value(); }
  const Shape& shape() const { return node_->value().shape(); }
  Index numel() const { return node_->value().numel(); }
  /// Scalar value of a single-element node.
  double item() const;
  const Tensor& grad() const { return node_->grad(); }
  bool requires_grad() const { return node_->requires_grad(); }
  void zero_grad() { node_->zero_grad(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }
  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a non-leaf node. `requires_grad` is inherited from the parents; when
/// no parent requires it the backward rule is dropped.
Var make_op(std::string op, Tensor value, const std::vector<Var>& parents, BackwardFn backward);

/// Populates gradients of every reachable node by reverse construction order.
/// Interior gradients are recomputed per call; leaf gradients accumulate.
void backward(const Var& loss);

// Linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
/// Batched affine map: x[N x D], weight[M x D], bias[M] -> [N x M].
Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias = std::nullopt);
/// Single vector: weight[M x D] * x[D] + bias[M].
Var dense(const Var& x, const Var& weight, const Var& bias);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var reshape(const Var& x, Shape shape);

// Convolution & pooling -----------------------------------------------------

/// Cross-correlation with zero padding. x is [C,H,W] or batched [N,C,H,W];
/// kernels [F,C,kh,kw]; bias [F].
Var conv2d(const Var& x, const Var& kernels, const Var& bias, Index stride = 1, Index padding = 0);
/// Windowed max over [C,H,W] or [N,C,H,W]. Ties go to the first element in row-major order.
Var maxpool2d(const Var& x, Index window, Index stride);
/// Column-wise max of a [N x M] matrix -> [M]; ties go to the lowest row.
Var max_over_rows(const Var& x);

// Activations ---------------------------------------------------------------

Var relu(const Var& x);
Var tanh(const Var& x);
/// Softmax over a rank-1 input, max-subtracted.
Var softmax(const Var& x);

// Losses --------------------------------------------------------------------

/// -log softmax(logits)[label] for logits of shape [K]; result is a scalar.
Var cross_entropy(const Var& logits, Index label);
/// Mean over rows of per-row cross-entropy for logits [N x K] against one label.
Var mean_cross_entropy(const Var& logits, Index label);

// Regularisation ------------------------------------------------------------

/// Inverted dropout. Identity when `training` is false or p == 0.
Var dropout(const Var& x, double p, bool training, Rng& rng);

}  // namespace attmil
