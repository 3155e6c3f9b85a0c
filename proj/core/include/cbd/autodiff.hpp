#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cbd::ad {

using Matrix = Eigen::MatrixXd;

// Reverse-mode tape over dense matrices. A tape records one forward pass;
// backward() walks it in reverse and accumulates into the gradient sinks of
// leaf nodes. Tapes are single-use and not thread-safe; build one per pass.
class Tape {
 public:
  using Var = std::size_t;

  /// Leaf whose gradient is added into *grad_sink on backward (nullable).
  Var leaf(const Matrix& value, Matrix* grad_sink);
  Var constant(Matrix value);

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1×n row to every row of a.
  Var add_row(Var a, Var row);
  Var scale(Var a, double s);
  Var tanh(Var a);
  /// Row-wise softmax with causal masking: entry (i, j) takes part iff
  /// j <= i and key_valid[j]. Rows with no valid entry become zero.
  Var causal_softmax(Var scores, std::span<const bool> key_valid);
  Var row(Var a, std::size_t index);
  /// Rows of a parameter matrix selected by ids (embedding lookup).
  Var gather_rows(Var table, std::span<const int> ids);
  /// Cross-entropy of a 1×C logit row against class y (log-sum-exp form).
  Var cross_entropy(Var logits, std::size_t y);
  /// Sum of scalar (1×1) nodes times `weight`.
  Var weighted_sum(std::span<const Var> scalars, double weight);

  const Matrix& value(Var v) const { return nodes_[v].value; }
  double scalar(Var v) const { return nodes_[v].value(0, 0); }

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Matrix* sink = nullptr;
    std::function<void(Tape&, Node&)> back;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Tape&, Node&)> back);
  Matrix& grad(Var v);
  bool needs(Var v) const { return nodes_[v].needs_grad; }

  std::vector<Node> nodes_;
};

/// Log-sum-exp cross-entropy on a plain vector, no tape.
double cross_entropy(const Eigen::RowVectorXd& logits, std::size_t y);

}  // namespace cbd::ad
