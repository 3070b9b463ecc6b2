#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "archdoor/random.hpp"
#include "archdoor/tensor.hpp"

namespace archdoor::ag {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

/// Handle to a node of the recorded computation. Copies share the node.
class Var {
 public:
  Var() = default;

  /// Leaf without gradient. Sampled noise enters the graph this way.
  static Var constant(Tensor value);
  /// Leaf whose gradient accumulates across backward() calls until zero_grad().
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Allocates a zero gradient on first access.
  Tensor& grad();
  const Tensor& grad() const;
  void zero_grad();

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse sweep from a single-element loss; accumulates into every reachable
/// gradient-enabled leaf. Throws ShapeError if `loss` is not a scalar.
void backward(const Var& loss);

/// While alive on this thread, ops record no parents or closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Rank-2 ops treat a rank-1 tensor as a single row.

Var matmul(const Var& a, const Var& b, bool transpose_b = false);
Var add(const Var& a, const Var& b);
/// x + c where c carries no gradient.
Var add_constant(const Var& x, const Tensor& c);
/// Adds `bias` (length = cols) to every row of x.
Var add_row(const Var& x, const Var& bias);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var relu(const Var& x);
Var softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Gathers rows of `table` for each id.
Var embedding(const Var& table, std::span<const int> ids);
Var slice_cols(const Var& x, std::size_t begin, std::size_t width);
Var concat_cols(std::span<const Var> parts);
Var mean_rows(const Var& x);
Var sum(const Var& x);
/// -log softmax(logits)[label] for a single row of logits.
Var cross_entropy(const Var& logits, int label);
/// Inverted dropout; identity when rate == 0.
Var dropout(const Var& x, double rate, RandomSource& rng);

// Tensor-level helpers shared by inference code and tests.
Tensor softmax_rows(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace archdoor::ag
