// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a handle to a node in a dynamically built graph. Every op records
// its parents and a closure that pushes the node's gradient back into them.
// Graphs are rebuilt on every forward pass; parameters are long-lived leaf
// nodes whose gradients accumulate until zeroed by the optimizer.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace amess {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Mask = std::vector<bool>;

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  /// Gradient accumulated by backward(); zeros of the value's shape if none.
  Matrix grad() const;
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

/// Runs reverse accumulation from a 1x1 root.
void backward(const Var& root);

Var constant(Matrix value);
Var scalar(double v);

Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds a 1 x cols row vector to every row of a.
Var add_row(const Var& a, const Var& row);
/// Multiplies every row of a elementwise by a 1 x cols row vector.
Var mul_row(const Var& a, const Var& row);
Var gelu(const Var& a);
Var tanh(const Var& a);

/// Row-wise softmax. Columns with key_mask[j] == false get probability 0.
/// Throws if a row has no attendable column.
Var softmax_rows(const Var& logits, const Mask& key_mask = {});

/// Row-wise standardization (x - mean) / sqrt(var + eps), no affine part.
Var normalize_rows(const Var& a, double eps);
/// Row-wise L2 normalization x / max(|x|, eps); zero rows stay zero.
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

/// Mean over the rows whose mask entry is true (all rows when mask empty).
Var mean_rows(const Var& a, const Mask& row_mask = {});
Var gather_rows(const Var& a, std::span<const int> indices);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
/// Elementwise product with a fixed matrix (dropout masks, zero padding).
Var mul_const(const Var& a, const Matrix& m);
Var sum(const Var& a);
/// Sum over the entries listed in `weights`: out = sum(a .* weights).
Var weighted_sum(const Var& a, const Matrix& weights);

/// out_i = log(sum_j w_ij * exp(a_ij)). Rows whose weights are all zero throw.
Var weighted_logsumexp_rows(const Var& a, const Matrix& weights);

/// Mean negative log-softmax of the target column per row.
Var cross_entropy(const Var& logits, std::span<const int> targets);

}  // namespace ag
}  // namespace amess
