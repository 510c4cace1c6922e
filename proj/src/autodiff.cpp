#include "cmsei/autodiff.hpp"

#include <cmath>

namespace cmsei {

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.value()) + " vs " +
                         shape_string(b.value()));
  }
}

// Handle to the slot the next record() call will fill.
Var next_slot(Tape& t) { return Var(&t, t.size()); }

void require_row(const char* op, const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError(std::string(op) + ": expected 1x" + std::to_string(a.cols()) +
                         " row, got " + shape_string(row.value()));
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_of(*this).value(id_); }
const Matrix& Var::grad() const { return tape_of(*this).grad(id_); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar(): tensor is " + shape_string(v));
  return v(0, 0);
}

Tape::Node& Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  Node& n = nodes_.back();
  if (n.view == nullptr) n.view = &n.own;
  return n;
}

Var Tape::constant(Matrix value) { return leaf(std::move(value), false); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad && recording_;
  push(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::view(const Matrix& m) {
  Node n;
  n.view = &m;
  push(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.view = &p.value;
  n.sink = recording_ ? &p : nullptr;
  n.requires_grad = recording_;
  push(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  Node n;
  n.own = std::move(value);
  n.is_leaf = false;
  if (recording_) {
    for (const Var& p : parents) n.requires_grad = n.requires_grad || requires_grad(p.id());
    if (n.requires_grad) n.backward = std::move(backward);
  }
  push(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
  if (!recording_) throw ContractError("backward() on a non-recording tape");
  if (loss.tape() != this) throw ContractError("backward(): loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward(): loss must be 1x1, got " + shape_string(loss.value()));
  }
  std::vector<Matrix> adjoints(nodes_.size());
  adjoints[loss.id()] = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || adjoints[i].size() == 0) continue;
    if (n.is_leaf) {
      if (n.sink != nullptr) {
        if (n.sink->grad.rows() != n.view->rows() || n.sink->grad.cols() != n.view->cols()) {
          n.sink->zero_grad();
        }
        n.sink->grad += adjoints[i];
      } else {
        if (n.grad.size() == 0) n.grad = Matrix::Zero(n.own.rows(), n.own.cols());
        n.grad += adjoints[i];
      }
      continue;
    }
    n.backward(adjoints[i], adjoints);
    adjoints[i].resize(0, 0);
  }
}

void Tape::zero_leaf_grads() {
  for (Node& n : nodes_) {
    if (n.is_leaf && n.sink == nullptr) n.grad.resize(0, 0);
  }
}

void accumulate(std::vector<Matrix>& adjoints, const Var& v, const Matrix& g) {
  if (!v.requires_grad()) return;
  Matrix& slot = adjoints[v.id()];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

// ---- primitives ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.value()) + " x " +
                         shape_string(b.value()));
  }
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](const Matrix& g, std::vector<Matrix>& adj) {
    if (a.requires_grad()) accumulate(adj, a, g * b.value().transpose());
    if (b.requires_grad()) accumulate(adj, b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  return t.record(a.value().transpose(), {a}, [a](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g.transpose());
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("add", a, b);
  return t.record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g);
    accumulate(adj, b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("sub", a, b);
  return t.record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g);
    accumulate(adj, b, -g);
  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("hadamard", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a, b](const Matrix& g, std::vector<Matrix>& adj) {
    if (a.requires_grad()) accumulate(adj, a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) accumulate(adj, b, g.cwiseProduct(a.value()));
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  require_row("add_row", a, row);
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g);
    if (row.requires_grad()) accumulate(adj, row, g.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  require_row("mul_row", a, row);
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return t.record(std::move(out), {a, row}, [a, row](const Matrix& g, std::vector<Matrix>& adj) {
    if (a.requires_grad()) {
      accumulate(adj, a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    }
    if (row.requires_grad()) accumulate(adj, row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  Tape& t = common_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("mul_col: expected " + std::to_string(a.rows()) + "x1 column, got " +
                         shape_string(col.value()));
  }
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(out), {a, col}, [a, col](const Matrix& g, std::vector<Matrix>& adj) {
    if (a.requires_grad()) {
      accumulate(adj, a, (g.array().colwise() * col.value().col(0).array()).matrix());
    }
    if (col.requires_grad()) accumulate(adj, col, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Var scale(const Var& a, double c) {
  Tape& t = tape_of(a);
  return t.record(a.value() * c, {a}, [a, c](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g * c);
  });
}

Var mask(const Var& a, const Matrix& m) {
  Tape& t = tape_of(a);
  if (m.rows() != a.rows() || m.cols() != a.cols()) {
    throw DimensionError("mask: shape mismatch " + shape_string(a.value()) + " vs " + shape_string(m));
  }
  return t.record(a.value().cwiseProduct(m), {a}, [a, m](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g.cwiseProduct(m));
  });
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseMax(0.0);
  return t.record(std::move(out), {a}, [a](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().tanh().matrix();
  return t.record(std::move(out), {a}, [a, y = next_slot(t)](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g.cwiseProduct((1.0 - y.value().array().square()).matrix()));
  });
}

Var sigmoid(const Var& a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return cmsei::sigmoid(x); });
  return t.record(std::move(out), {a}, [a, y = next_slot(t)](const Matrix& g, std::vector<Matrix>& adj) {
    const Matrix& out = y.value();
    accumulate(adj, a, g.cwiseProduct((out.array() * (1.0 - out.array())).matrix()));
  });
}

Var smoothed_softmax_rows(const Var& a, double lambda) {
  Tape& t = tape_of(a);
  Matrix out = cmsei::smoothed_softmax_rows(a.value(), lambda);
  return t.record(std::move(out), {a}, [a, y = next_slot(t), lambda](const Matrix& g, std::vector<Matrix>& adj) {
    const Matrix& out = y.value();
    // d/dx_j of softmax(lambda x): lambda * y_j * (g_j - sum_k g_k y_k)
    const Vector inner = g.cwiseProduct(out).rowwise().sum();
    Matrix da = (g.colwise() - inner).cwiseProduct(out) * lambda;
    accumulate(adj, a, da);
  });
}

Var l2_normalize_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Vector norms = a.value().rowwise().norm();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (norms(i) > 0.0) out.row(i) /= norms(i);
  }
  return t.record(std::move(out), {a}, [a, y = next_slot(t), norms](const Matrix& g, std::vector<Matrix>& adj) {
    const Matrix& out = y.value();
    Matrix da = Matrix::Zero(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (norms(i) <= 0.0) continue;
      const double proj = g.row(i).dot(out.row(i));
      da.row(i) = (g.row(i) - proj * out.row(i)) / norms(i);
    }
    accumulate(adj, a, da);
  });
}

Var mean_rows(const Var& a) { return mean_rows(a, std::vector<bool>(a.rows(), true)); }

Var mean_rows(const Var& a, const std::vector<bool>& row_mask) {
  Tape& t = tape_of(a);
  if (static_cast<Eigen::Index>(row_mask.size()) != a.rows()) {
    throw DimensionError("mean_rows: mask has " + std::to_string(row_mask.size()) + " entries for " +
                         std::to_string(a.rows()) + " rows");
  }
  Vector weights = Vector::Zero(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) weights(i) = row_mask[i] ? 1.0 : 0.0;
  const double count = weights.sum();
  if (count == 0.0) throw ContractError("mean_rows: no rows selected");
  weights /= count;
  Matrix out = weights.transpose() * a.value();
  return t.record(std::move(out), {a}, [a, weights](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, weights * g);
  });
}

Var sum_cols(const Var& a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().rowwise().sum();
  return t.record(std::move(out), {a}, [a](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, g.col(0).replicate(1, a.cols()));
  });
}

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](const Matrix& g, std::vector<Matrix>& adj) {
    accumulate(adj, a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var cosine(const Var& u, const Var& v, ZeroNormPolicy policy) {
  Tape& t = common_tape(u, v);
  require_same_shape("cosine", u, v);
  const double nu = u.value().norm();
  const double nv = v.value().norm();
  Matrix out(1, 1);
  out(0, 0) = cmsei::cosine(u.value(), v.value(), policy);
  const bool degenerate = nu == 0.0 || nv == 0.0;
  return t.record(out, {u, v}, [u, v, nu, nv, degenerate](const Matrix& g, std::vector<Matrix>& adj) {
    if (degenerate) return;
    const Matrix& a = u.value();
    const Matrix& b = v.value();
    const double c = a.reshaped().dot(b.reshaped()) / (nu * nv);
    if (u.requires_grad()) accumulate(adj, u, g(0, 0) * (b / (nu * nv) - c * a / (nu * nu)));
    if (v.requires_grad()) accumulate(adj, v, g(0, 0) * (a / (nu * nv) - c * b / (nv * nv)));
  });
}

Var symmetric_normalize(const Var& a, double eps) {
  Tape& t = tape_of(a);
  if (a.rows() != a.cols()) throw DimensionError("symmetric_normalize: matrix is " + shape_string(a.value()));
  const Matrix& A = a.value();
  const Vector degree = A.cwiseAbs().rowwise().sum().array() + eps;
  const Vector s = degree.array().rsqrt();
  Matrix out = s.asDiagonal() * A * s.asDiagonal();
  return t.record(std::move(out), {a}, [a, degree, s](const Matrix& g, std::vector<Matrix>& adj) {
    const Matrix& A = a.value();
    Matrix da = s.asDiagonal() * g * s.asDiagonal();
    const Matrix ga = g.cwiseProduct(A);
    // dL/ds_i = sum_j g_ij A_ij s_j + sum_j g_ji A_ji s_j
    const Vector ds = ga * s + ga.transpose() * s;
    const Vector dd = ds.array() * (-0.5) * s.array() / degree.array();
    const Matrix sign = A.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    da += dd.asDiagonal() * sign;
    accumulate(adj, a, da);
  });
}

Var assemble(const std::vector<Var>& scalars, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(scalars.size()) != rows * cols || scalars.empty()) {
    throw DimensionError("assemble: " + std::to_string(scalars.size()) + " scalars for " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  Tape& t = tape_of(scalars.front());
  Matrix out(rows, cols);
  bool any_grad = false;
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    const Var& s = scalars[i];
    if (s.tape() != &t) throw ContractError("assemble: scalars recorded on different tapes");
    out(i / cols, i % cols) = s.scalar();
    any_grad = any_grad || s.requires_grad();
  }
  // Gate requires_grad through a representative parent that needs grad.
  Var gate = scalars.front();
  for (const Var& s : scalars) {
    if (s.requires_grad()) {
      gate = s;
      break;
    }
  }
  return t.record(std::move(out), {gate}, [scalars, cols](const Matrix& g, std::vector<Matrix>& adj) {
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      accumulate(adj, scalars[i], Matrix::Constant(1, 1, g(i / cols, i % cols)));
    }
  });
}

}  // namespace cmsei
