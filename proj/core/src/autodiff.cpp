#include "cbd/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cbd::ad {

namespace {

double log_sum_exp(const Eigen::RowVectorXd& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

double cross_entropy(const Eigen::RowVectorXd& logits, std::size_t y) {
  if (y >= static_cast<std::size_t>(logits.size())) {
    throw std::out_of_range("cross_entropy: class index out of range");
  }
  return log_sum_exp(logits) - logits(static_cast<Eigen::Index>(y));
}

Tape::Var Tape::push(Matrix value, bool needs_grad,
                     std::function<void(Tape&, Node&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Tape::Var Tape::leaf(const Matrix& value, Matrix* grad_sink) {
  Var v = push(value, grad_sink != nullptr, nullptr);
  nodes_[v].sink = grad_sink;
  return v;
}

Tape::Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Tape::Var Tape::matmul(Var a, Var b) {
  return push(value(a) * value(b), needs(a) || needs(b), [a, b](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a).noalias() += n.grad * t.value(b).transpose();
    if (t.needs(b)) t.grad(b).noalias() += t.value(a).transpose() * n.grad;
  });
}

Tape::Var Tape::matmul_bt(Var a, Var b) {
  return push(value(a) * value(b).transpose(), needs(a) || needs(b), [a, b](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a).noalias() += n.grad * t.value(b);
    if (t.needs(b)) t.grad(b).noalias() += n.grad.transpose() * t.value(a);
  });
}

Tape::Var Tape::add(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
    throw std::invalid_argument("Tape::add: shape mismatch");
  }
  return push(value(a) + value(b), needs(a) || needs(b), [a, b](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a) += n.grad;
    if (t.needs(b)) t.grad(b) += n.grad;
  });
}

Tape::Var Tape::add_row(Var a, Var row_var) {
  Matrix out = value(a);
  out.rowwise() += value(row_var).row(0);
  return push(std::move(out), needs(a) || needs(row_var), [a, row_var](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a) += n.grad;
    if (t.needs(row_var)) t.grad(row_var) += n.grad.colwise().sum();
  });
}

Tape::Var Tape::scale(Var a, double s) {
  return push(value(a) * s, needs(a), [a, s](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a) += n.grad * s;
  });
}

Tape::Var Tape::tanh(Var a) {
  Matrix out = value(a).array().tanh().matrix();
  return push(out, needs(a), [a](Tape& t, Node& n) {
    if (t.needs(a)) {
      t.grad(a).array() += n.grad.array() * (1.0 - n.value.array().square());
    }
  });
}

Tape::Var Tape::causal_softmax(Var scores, std::span<const bool> key_valid) {
  const Matrix& s = value(scores);
  const auto rows = s.rows();
  const auto cols = s.cols();
  if (static_cast<std::size_t>(cols) != key_valid.size()) {
    throw std::invalid_argument("Tape::causal_softmax: mask length mismatch");
  }
  Matrix out = Matrix::Zero(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= std::min(i, cols - 1); ++j) {
      if (key_valid[static_cast<std::size_t>(j)]) m = std::max(m, s(i, j));
    }
    if (!std::isfinite(m)) continue;
    double total = 0;
    for (Eigen::Index j = 0; j <= std::min(i, cols - 1); ++j) {
      if (key_valid[static_cast<std::size_t>(j)]) {
        out(i, j) = std::exp(s(i, j) - m);
        total += out(i, j);
      }
    }
    out.row(i) /= total;
  }
  return push(std::move(out), needs(scores), [scores](Tape& t, Node& n) {
    if (!t.needs(scores)) return;
    const Matrix& y = n.value;
    Eigen::VectorXd dot = (n.grad.array() * y.array()).rowwise().sum();
    Matrix dx = y.array() * (n.grad.colwise() - dot).array();
    t.grad(scores) += dx;
  });
}

Tape::Var Tape::row(Var a, std::size_t index) {
  const auto i = static_cast<Eigen::Index>(index);
  if (i >= value(a).rows()) throw std::out_of_range("Tape::row: index out of range");
  return push(value(a).row(i), needs(a), [a, i](Tape& t, Node& n) {
    if (t.needs(a)) t.grad(a).row(i) += n.grad.row(0);
  });
}

Tape::Var Tape::gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tab = value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= tab.rows()) {
      throw std::out_of_range("Tape::gather_rows: id out of range");
    }
    out.row(static_cast<Eigen::Index>(k)) = tab.row(ids[k]);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return push(std::move(out), needs(table), [table, kept](Tape& t, Node& n) {
    if (!t.needs(table)) return;
    Matrix& g = t.grad(table);
    for (std::size_t k = 0; k < kept.size(); ++k) {
      g.row(kept[k]) += n.grad.row(static_cast<Eigen::Index>(k));
    }
  });
}

Tape::Var Tape::cross_entropy(Var logits, std::size_t y) {
  const Eigen::RowVectorXd z = value(logits).row(0);
  Matrix out(1, 1);
  out(0, 0) = ad::cross_entropy(z, y);
  return push(std::move(out), needs(logits), [logits, y](Tape& t, Node& n) {
    if (!t.needs(logits)) return;
    const Eigen::RowVectorXd z = t.value(logits).row(0);
    Eigen::RowVectorXd p = (z.array() - z.maxCoeff()).exp();
    p /= p.sum();
    p(static_cast<Eigen::Index>(y)) -= 1.0;
    t.grad(logits).row(0) += n.grad(0, 0) * p;
  });
}

Tape::Var Tape::weighted_sum(std::span<const Var> scalars, double weight) {
  double total = 0;
  bool any = false;
  for (Var s : scalars) {
    total += scalar(s);
    any = any || needs(s);
  }
  Matrix out(1, 1);
  out(0, 0) = total * weight;
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return push(std::move(out), any, [inputs, weight](Tape& t, Node& n) {
    for (Var s : inputs) {
      if (t.needs(s)) t.grad(s)(0, 0) += n.grad(0, 0) * weight;
    }
  });
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
  grad(loss)(0, 0) = 1.0;
  for (std::size_t k = loss + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this, n);
    if (n.sink) *n.sink += n.grad;
  }
}

}  // namespace cbd::ad
