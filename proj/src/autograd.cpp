#include "amess/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "amess/error.hpp"

namespace amess {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid_input";
    case ErrorCode::Validation: return "validation";
    case ErrorCode::Io: return "io";
    case ErrorCode::Divergence: return "divergence";
  }
  return "unknown";
}

namespace ag {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

void Var::zero_grad() { node_->grad.resize(0, 0); }

namespace {

// Creates a result node; it needs a gradient only if some parent does.
Var make_result(Matrix value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(bw);
  }
  return Var::from_node(std::move(node));
}

void push(const std::shared_ptr<Node>& parent, const Matrix& g) {
  if (parent->requires_grad) parent->accumulate(g);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()) + ")");
}

}  // namespace

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Eigen::Index inner_a = transpose_a ? a.rows() : a.cols();
  const Eigen::Index inner_b = transpose_b ? b.cols() : b.rows();
  require(inner_a == inner_b, "matmul: inner dimensions differ (" + std::to_string(inner_a) +
                                  " vs " + std::to_string(inner_b) + ")");
  Matrix out;
  if (!transpose_a && !transpose_b) {
    out = a.value() * b.value();
  } else if (transpose_a && !transpose_b) {
    out = a.value().transpose() * b.value();
  } else if (!transpose_a && transpose_b) {
    out = a.value() * b.value().transpose();
  } else {
    out = a.value().transpose() * b.value().transpose();
  }
  return make_result(std::move(out), {a, b}, [transpose_a, transpose_b](Node& n) {
    const Matrix& A = n.parents[0]->value;
    const Matrix& B = n.parents[1]->value;
    const Matrix& G = n.grad;
    // C = op(A) op(B)
    if (n.parents[0]->requires_grad) {
      Matrix gop_a = transpose_b ? Matrix(G * B) : Matrix(G * B.transpose());
      push(n.parents[0], transpose_a ? Matrix(gop_a.transpose()) : gop_a);
    }
    if (n.parents[1]->requires_grad) {
      Matrix gop_b = transpose_a ? Matrix(A * G) : Matrix(A.transpose() * G);
      push(n.parents[1], transpose_b ? Matrix(gop_b.transpose()) : gop_b);
    }
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    push(n.parents[0], n.grad);
    push(n.parents[1], n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    push(n.parents[0], n.grad);
    push(n.parents[1], -n.grad);
  });
}

Var hadamard(const Var& a, const Var& b) {
  check_same_shape(a, b, "hadamard");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    push(n.parents[0], n.grad.cwiseProduct(n.parents[1]->value));
    push(n.parents[1], n.grad.cwiseProduct(n.parents[0]->value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) { push(n.parents[0], n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row vector width mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    push(n.parents[0], n.grad);
    push(n.parents[1], n.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row vector width mismatch");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make_result(std::move(out), {a, row}, [](Node& n) {
    const Matrix& A = n.parents[0]->value;
    const Matrix& r = n.parents[1]->value;
    push(n.parents[0], Matrix(n.grad.array().rowwise() * r.row(0).array()));
    push(n.parents[1], n.grad.cwiseProduct(A).colwise().sum());
  });
}

Var gelu(const Var& a) {
  // tanh approximation; smooth everywhere, which keeps finite-difference checks clean.
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double k = 0.044715;
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  });
  return make_result(std::move(out), {a}, [](Node& n) {
    Matrix d = n.parents[0]->value.unaryExpr([](double x) {
      const double u = c * (x + k * x * x * x);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * k * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    });
    push(n.parents[0], n.grad.cwiseProduct(d));
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_result(out, {a}, [](Node& n) {
    Matrix t = n.parents[0]->value.array().tanh().matrix();
    push(n.parents[0], Matrix(n.grad.array() * (1.0 - t.array().square())));
  });
}

Var softmax_rows(const Var& logits, const Mask& key_mask) {
  const Eigen::Index rows = logits.rows();
  const Eigen::Index cols = logits.cols();
  require(key_mask.empty() || static_cast<Eigen::Index>(key_mask.size()) == cols,
          "softmax_rows: mask length differs from column count");
  Matrix p = Matrix::Zero(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (key_mask.empty() || key_mask[j]) mx = std::max(mx, logits.value()(i, j));
    }
    const bool any_key = key_mask.empty() ? cols > 0 : std::find(key_mask.begin(), key_mask.end(), true) != key_mask.end();
    require(any_key, "no attendable keys");
    if (!std::isfinite(mx)) fail(ErrorCode::Divergence, "softmax: non-finite logits");
    double z = 0.0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (key_mask.empty() || key_mask[j]) {
        p(i, j) = std::exp(logits.value()(i, j) - mx);
        z += p(i, j);
      }
    }
    p.row(i) /= z;
  }
  return make_result(p, {logits}, [p](Node& n) {
    // dL/dx_j = p_j (g_j - sum_k g_k p_k)
    Eigen::VectorXd dot = n.grad.cwiseProduct(p).rowwise().sum();
    Matrix g = p.cwiseProduct(n.grad.colwise() - dot);
    push(n.parents[0], g);
  });
}

Var normalize_rows(const Var& a, double eps) {
  const Eigen::Index d = a.cols();
  Matrix centered = a.value().colwise() - a.value().rowwise().mean();
  Eigen::VectorXd inv_std(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double var = centered.row(i).squaredNorm() / static_cast<double>(d);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
  }
  Matrix xhat = centered.array().colwise() * inv_std.array();
  return make_result(xhat, {a}, [xhat, inv_std, d](Node& n) {
    const Matrix& g = n.grad;
    Eigen::VectorXd g_mean = g.rowwise().mean();
    Eigen::VectorXd gx_mean = g.cwiseProduct(xhat).rowwise().mean();
    Matrix out = (g.colwise() - g_mean) - Matrix(xhat.array().colwise() * gx_mean.array());
    out = out.array().colwise() * inv_std.array();
    push(n.parents[0], out);
    (void)d;
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Eigen::VectorXd denom = norms.cwiseMax(eps);
  Matrix out = a.value().array().colwise() / denom.array();
  return make_result(out, {a}, [out, norms, denom, eps](Node& n) {
    Matrix g(n.grad.rows(), n.grad.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (norms(i) > eps) {
        const double proj = n.grad.row(i).dot(out.row(i));
        g.row(i) = (n.grad.row(i) - proj * out.row(i)) / denom(i);
      } else {
        g.row(i) = n.grad.row(i) / denom(i);
      }
    }
    push(n.parents[0], g);
  });
}

Var mean_rows(const Var& a, const Mask& row_mask) {
  require(row_mask.empty() || static_cast<Eigen::Index>(row_mask.size()) == a.rows(),
          "mean_rows: mask length differs from row count");
  Eigen::VectorXd w(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) w(i) = row_mask.empty() || row_mask[i] ? 1.0 : 0.0;
  const double count = w.sum();
  require(count > 0.0, "mean_rows: no valid rows");
  w /= count;
  Matrix out = w.transpose() * a.value();
  return make_result(out, {a}, [w](Node& n) { push(n.parents[0], Matrix(w * n.grad)); });
}

Var gather_rows(const Var& a, std::span<const int> indices) {
  std::vector<int> idx(indices.begin(), indices.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
  }
  return make_result(out, {a}, [idx](Node& n) {
    Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += n.grad.row(static_cast<Eigen::Index>(r));
    push(n.parents[0], g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count > 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, count);
  return make_result(out, {a}, [start, count](Node& n) {
    Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    g.middleCols(start, count) = n.grad;
    push(n.parents[0], g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_result(out, std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      push(n.parents[i], n.grad.middleCols(offsets[i], n.parents[i]->value.cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_result(out, std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      push(n.parents[i], n.grad.middleRows(offsets[i], n.parents[i]->value.rows()));
    }
  });
}

Var mul_const(const Var& a, const Matrix& m) {
  require(a.rows() == m.rows() && a.cols() == m.cols(), "mul_const: shape mismatch");
  return make_result(a.value().cwiseProduct(m), {a},
                     [m](Node& n) { push(n.parents[0], n.grad.cwiseProduct(m)); });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(out, {a}, [](Node& n) {
    const Matrix& v = n.parents[0]->value;
    push(n.parents[0], Matrix::Constant(v.rows(), v.cols(), n.grad(0, 0)));
  });
}

Var weighted_sum(const Var& a, const Matrix& weights) {
  require(a.rows() == weights.rows() && a.cols() == weights.cols(), "weighted_sum: shape mismatch");
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(weights).sum();
  return make_result(out, {a}, [weights](Node& n) { push(n.parents[0], weights * n.grad(0, 0)); });
}

Var weighted_logsumexp_rows(const Var& a, const Matrix& weights) {
  require(a.rows() == weights.rows() && a.cols() == weights.cols(),
          "weighted_logsumexp_rows: shape mismatch");
  const Eigen::Index rows = a.rows();
  Matrix out(rows, 1);
  Matrix soft = Matrix::Zero(rows, a.cols());
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (weights(i, j) > 0.0) mx = std::max(mx, a.value()(i, j));
    }
    require(std::isfinite(mx), "weighted_logsumexp_rows: row " + std::to_string(i) + " has no terms");
    double z = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (weights(i, j) > 0.0) {
        soft(i, j) = weights(i, j) * std::exp(a.value()(i, j) - mx);
        z += soft(i, j);
      }
    }
    soft.row(i) /= z;
    out(i, 0) = mx + std::log(z);
  }
  return make_result(out, {a}, [soft](Node& n) {
    push(n.parents[0], Matrix(soft.array().colwise() * n.grad.col(0).array()));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Eigen::Index rows = logits.rows();
  require(rows > 0 && static_cast<Eigen::Index>(targets.size()) == rows,
          "cross_entropy: target count differs from batch size");
  std::vector<int> labels(targets.begin(), targets.end());
  Matrix probs(rows, logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < logits.cols(), "cross_entropy: label " + std::to_string(y) + " out of range");
    const double mx = logits.value().row(i).maxCoeff();
    const double z = (logits.value().row(i).array() - mx).exp().sum();
    const double lse = mx + std::log(z);
    probs.row(i) = (logits.value().row(i).array() - lse).exp().matrix();
    total += lse - logits.value()(i, y);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(rows);
  return make_result(out, {logits}, [probs, labels](Node& n) {
    Matrix g = probs;
    for (std::size_t i = 0; i < labels.size(); ++i) g(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
    g *= n.grad(0, 0) / static_cast<double>(labels.size());
    push(n.parents[0], g);
  });
}

}  // namespace ag
}  // namespace amess
