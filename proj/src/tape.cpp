#include "evalfrl/tape.hpp"

#include <cmath>

namespace evalfrl::tape {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": operand shapes differ");
}

double stable_softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid_scalar(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

NodeId Tape::push(Matrix value, std::function<void()> pull) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(pull)});
  return NodeId(nodes_.size() - 1);
}

void Tape::note_kink(double margin) {
  if (margin < min_kink_margin_) min_kink_margin_ = margin;
}

NodeId Tape::constant(Matrix v) { return push(std::move(v)); }
NodeId Tape::leaf(const Matrix& v) { return push(v); }

NodeId Tape::add(NodeId a, NodeId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "add");
  NodeId id = push(nodes_[a].value + nodes_[b].value);
  nodes_[id].pull = [this, id, a, b] {
    nodes_[a].grad += nodes_[id].grad;
    nodes_[b].grad += nodes_[id].grad;
  };
  return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "sub");
  NodeId id = push(nodes_[a].value - nodes_[b].value);
  nodes_[id].pull = [this, id, a, b] {
    nodes_[a].grad += nodes_[id].grad;
    nodes_[b].grad -= nodes_[id].grad;
  };
  return id;
}

NodeId Tape::hadamard(NodeId a, NodeId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "hadamard");
  NodeId id = push(nodes_[a].value.cwiseProduct(nodes_[b].value));
  nodes_[id].pull = [this, id, a, b] {
    nodes_[a].grad += nodes_[id].grad.cwiseProduct(nodes_[b].value);
    nodes_[b].grad += nodes_[id].grad.cwiseProduct(nodes_[a].value);
  };
  return id;
}

NodeId Tape::scale(NodeId a, double c) {
  NodeId id = push(nodes_[a].value * c);
  nodes_[id].pull = [this, id, a, c] { nodes_[a].grad += nodes_[id].grad * c; };
  return id;
}

NodeId Tape::add_scalar(NodeId a, double c) {
  NodeId id = push(nodes_[a].value.array() + c);
  nodes_[id].pull = [this, id, a] { nodes_[a].grad += nodes_[id].grad; };
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.rows())
    throw ShapeError("matmul: inner dimensions differ");
  NodeId id = push(nodes_[a].value * nodes_[b].value);
  nodes_[id].pull = [this, id, a, b] {
    nodes_[a].grad += nodes_[id].grad * nodes_[b].value.transpose();
    nodes_[b].grad += nodes_[a].value.transpose() * nodes_[id].grad;
  };
  return id;
}

NodeId Tape::transpose(NodeId a) {
  NodeId id = push(nodes_[a].value.transpose());
  nodes_[id].pull = [this, id, a] { nodes_[a].grad += nodes_[id].grad.transpose(); };
  return id;
}

NodeId Tape::add_row(NodeId x, NodeId r) {
  if (nodes_[r].value.rows() != 1 || nodes_[r].value.cols() != nodes_[x].value.cols())
    throw ShapeError("add_row: broadcast row shape mismatch");
  Matrix out = nodes_[x].value;
  out.rowwise() += nodes_[r].value.row(0);
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, x, r] {
    nodes_[x].grad += nodes_[id].grad;
    nodes_[r].grad += nodes_[id].grad.colwise().sum();
  };
  return id;
}

NodeId Tape::tanh_op(NodeId a) {
  NodeId id = push(nodes_[a].value.array().tanh());
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() +=
        nodes_[id].grad.array() * (1.0 - nodes_[id].value.array().square());
  };
  return id;
}

NodeId Tape::sigmoid_op(NodeId a) {
  NodeId id = push(nodes_[a].value.unaryExpr([](double z) { return sigmoid_scalar(z); }));
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() += nodes_[id].grad.array() * nodes_[id].value.array() *
                              (1.0 - nodes_[id].value.array());
  };
  return id;
}

NodeId Tape::relu_op(NodeId a) {
  note_kink(nodes_[a].value.cwiseAbs().minCoeff());
  NodeId id = push(nodes_[a].value.cwiseMax(0.0));
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() +=
        nodes_[id].grad.array() * (nodes_[a].value.array() > 0.0).cast<double>();
  };
  return id;
}

NodeId Tape::exp_op(NodeId a) {
  NodeId id = push(nodes_[a].value.array().exp());
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() += nodes_[id].grad.array() * nodes_[id].value.array();
  };
  return id;
}

NodeId Tape::log_op(NodeId a) {
  if (nodes_[a].value.minCoeff() <= 0.0)
    throw NumericError("log: non-positive argument");
  NodeId id = push(nodes_[a].value.array().log());
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() += nodes_[id].grad.array() / nodes_[a].value.array();
  };
  return id;
}

NodeId Tape::square_op(NodeId a) {
  NodeId id = push(nodes_[a].value.array().square());
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() += 2.0 * nodes_[id].grad.array() * nodes_[a].value.array();
  };
  return id;
}

NodeId Tape::abs_op(NodeId a) {
  note_kink(nodes_[a].value.cwiseAbs().minCoeff());
  NodeId id = push(nodes_[a].value.cwiseAbs());
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() +=
        nodes_[id].grad.array() * nodes_[a].value.array().sign();
  };
  return id;
}

NodeId Tape::clamp_op(NodeId a, double lo, double hi) {
  double margin = 1e300;
  for (long i = 0; i < nodes_[a].value.size(); ++i) {
    const double v = nodes_[a].value.data()[i];
    margin = std::min({margin, std::abs(v - lo), std::abs(v - hi)});
  }
  note_kink(margin);
  NodeId id = push(nodes_[a].value.cwiseMax(lo).cwiseMin(hi));
  nodes_[id].pull = [this, id, a, lo, hi] {
    const auto& v = nodes_[a].value.array();
    nodes_[a].grad.array() +=
        nodes_[id].grad.array() * ((v > lo) && (v < hi)).cast<double>();
  };
  return id;
}

NodeId Tape::sum(NodeId a) {
  Matrix out(1, 1);
  out(0, 0) = nodes_[a].value.sum();
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a] {
    nodes_[a].grad.array() += nodes_[id].grad(0, 0);
  };
  return id;
}

NodeId Tape::mean(NodeId a) {
  const double count = double(nodes_[a].value.size());
  Matrix out(1, 1);
  out(0, 0) = nodes_[a].value.sum() / count;
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a, count] {
    nodes_[a].grad.array() += nodes_[id].grad(0, 0) / count;
  };
  return id;
}

NodeId Tape::col_mean(NodeId a) {
  const double rows = double(nodes_[a].value.rows());
  NodeId id = push(Matrix(nodes_[a].value.colwise().mean()));
  nodes_[id].pull = [this, id, a, rows] {
    nodes_[a].grad += (Matrix::Ones(long(rows), 1) * nodes_[id].grad) / rows;
  };
  return id;
}

NodeId Tape::select_rows(NodeId a, const std::vector<int>& rows) {
  if (rows.empty()) throw ShapeError("select_rows: empty selection");
  Matrix out(long(rows.size()), nodes_[a].value.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= nodes_[a].value.rows())
      throw ShapeError("select_rows: index out of range");
    out.row(long(i)) = nodes_[a].value.row(rows[i]);
  }
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a, rows] {
    for (std::size_t i = 0; i < rows.size(); ++i)
      nodes_[a].grad.row(rows[i]) += nodes_[id].grad.row(long(i));
  };
  return id;
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  if (nodes_[a].value.rows() != nodes_[b].value.rows())
    throw ShapeError("concat_cols: row counts differ");
  const long ca = nodes_[a].value.cols(), cb = nodes_[b].value.cols();
  Matrix out(nodes_[a].value.rows(), ca + cb);
  out.leftCols(ca) = nodes_[a].value;
  out.rightCols(cb) = nodes_[b].value;
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a, b, ca, cb] {
    nodes_[a].grad += nodes_[id].grad.leftCols(ca);
    nodes_[b].grad += nodes_[id].grad.rightCols(cb);
  };
  return id;
}

NodeId Tape::row_softmax(NodeId a) {
  Matrix out = nodes_[a].value;
  for (long i = 0; i < out.rows(); ++i) {
    const double peak = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a] {
    const Matrix& p = nodes_[id].value;
    const Matrix& g = nodes_[id].grad;
    for (long i = 0; i < p.rows(); ++i) {
      const double dot = p.row(i).dot(g.row(i));
      nodes_[a].grad.row(i).array() +=
          p.row(i).array() * (g.row(i).array() - dot);
    }
  };
  return id;
}

NodeId Tape::grl(NodeId a, double lambda) {
  NodeId id = push(nodes_[a].value);
  nodes_[id].pull = [this, id, a, lambda] {
    nodes_[a].grad -= lambda * nodes_[id].grad;
  };
  return id;
}

NodeId Tape::straight_through(NodeId p, const Matrix& residual) {
  require_same_shape(nodes_[p].value, residual, "straight_through");
  NodeId id = push(nodes_[p].value + residual);
  nodes_[id].pull = [this, id, p] { nodes_[p].grad += nodes_[id].grad; };
  return id;
}

NodeId Tape::pairwise_sqdist(NodeId a, NodeId b) {
  if (nodes_[a].value.cols() != nodes_[b].value.cols())
    throw ShapeError("pairwise_sqdist: feature widths differ");
  const Matrix& va = nodes_[a].value;
  const Matrix& vb = nodes_[b].value;
  Matrix out = (-2.0 * va * vb.transpose());
  out.colwise() += va.rowwise().squaredNorm();
  out.rowwise() += vb.rowwise().squaredNorm().transpose();
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, a, b] {
    const Matrix& g = nodes_[id].grad;
    const Matrix& va2 = nodes_[a].value;
    const Matrix& vb2 = nodes_[b].value;
    const Vector row_sums = g.rowwise().sum();
    const Vector col_sums = g.colwise().sum().transpose();
    nodes_[a].grad += 2.0 * (row_sums.asDiagonal() * va2 - g * vb2);
    nodes_[b].grad += 2.0 * (col_sums.asDiagonal() * vb2 - g.transpose() * va2);
  };
  return id;
}

NodeId Tape::rbf_mmd2(NodeId a, NodeId b, double bandwidth) {
  if (bandwidth <= 0) throw NumericError("rbf_mmd2: bandwidth must be positive");
  const double factor = -1.0 / (2.0 * bandwidth * bandwidth);
  NodeId kaa = mean(exp_op(scale(pairwise_sqdist(a, a), factor)));
  NodeId kbb = mean(exp_op(scale(pairwise_sqdist(b, b), factor)));
  NodeId kab = mean(exp_op(scale(pairwise_sqdist(a, b), factor)));
  return add(add(kaa, kbb), scale(kab, -2.0));
}

NodeId Tape::bce_with_logits_mean(NodeId logits, const Matrix& targets) {
  require_same_shape(nodes_[logits].value, targets, "bce_with_logits_mean");
  const Matrix& z = nodes_[logits].value;
  double total = 0;
  for (long i = 0; i < z.size(); ++i)
    total += stable_softplus(z.data()[i]) - targets.data()[i] * z.data()[i];
  const double count = double(z.size());
  Matrix out(1, 1);
  out(0, 0) = total / count;
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, logits, targets, count] {
    const double g = nodes_[id].grad(0, 0);
    const Matrix& zb = nodes_[logits].value;
    for (long i = 0; i < zb.size(); ++i)
      nodes_[logits].grad.data()[i] +=
          g * (sigmoid_scalar(zb.data()[i]) - targets.data()[i]) / count;
  };
  return id;
}

NodeId Tape::bernoulli_mi_bits(NodeId code, const std::vector<int>& groups) {
  const Matrix& m = nodes_[code].value;
  if (long(groups.size()) != m.rows())
    throw ShapeError("bernoulli_mi_bits: group vector length mismatch");
  long n1 = 0;
  for (int g : groups) n1 += (g == 1);
  const long n = m.rows(), n0 = n - n1;
  if (n0 == 0 || n1 == 0) throw ShapeError("bernoulli_mi_bits: a group is empty");

  Matrix q(2, m.cols());
  q.setZero();
  for (long i = 0; i < n; ++i) q.row(groups[std::size_t(i)]) += m.row(i);
  q.row(0) /= double(n0);
  q.row(1) /= double(n1);
  const double w0 = double(n0) / double(n), w1 = double(n1) / double(n);

  double margin = 1e300;
  for (long j = 0; j < m.cols(); ++j)
    for (int s = 0; s < 2; ++s)
      margin = std::min({margin, std::abs(q(s, j)), std::abs(1.0 - q(s, j))});
  note_kink(margin);

  constexpr double kEps = 1e-12;
  const double inv_log2 = 1.0 / std::log(2.0);
  auto log2_clamped = [&](double v) { return std::log(std::max(v, kEps)) * inv_log2; };

  double total = 0;
  Matrix coef(2, m.cols());  // d(total)/d m_ij = coef(s_i, j) / n
  for (long j = 0; j < m.cols(); ++j) {
    const double qbar = w0 * q(0, j) + w1 * q(1, j);
    const double l2_qbar = log2_clamped(qbar), l2_1mqbar = log2_clamped(1.0 - qbar);
    for (int s = 0; s < 2; ++s) {
      const double w = s == 0 ? w0 : w1;
      const double qs = q(s, j);
      const double l2_qs = log2_clamped(qs), l2_1mqs = log2_clamped(1.0 - qs);
      total += w * (qs * (l2_qs - l2_qbar) + (1.0 - qs) * (l2_1mqs - l2_1mqbar));
      coef(s, j) = (l2_qs - l2_qbar) - (l2_1mqs - l2_1mqbar);
    }
  }

  Matrix out(1, 1);
  out(0, 0) = total;
  NodeId id = push(std::move(out));
  nodes_[id].pull = [this, id, code, groups, coef, n] {
    const double g = nodes_[id].grad(0, 0);
    for (long i = 0; i < long(groups.size()); ++i)
      nodes_[code].grad.row(i) +=
          (g / double(n)) * coef.row(groups[std::size_t(i)]);
  };
  return id;
}

void Tape::backward(NodeId root) {
  if (nodes_[root].value.rows() != 1 || nodes_[root].value.cols() != 1)
    throw ShapeError("backward: root must be a scalar node");
  for (Node& node : nodes_) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  nodes_[root].grad(0, 0) = 1.0;
  for (NodeId id = root; id >= 0; --id)
    if (nodes_[id].pull) nodes_[id].pull();
}

}  // namespace evalfrl::tape
