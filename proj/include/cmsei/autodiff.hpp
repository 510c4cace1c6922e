#pragma once

// Reverse-mode automatic differentiation over dense 2-D matrices.
//
// A Tape records every primitive in execution order. Var is a light handle
// (tape pointer + slot index) to one recorded value. Calling backward() on a
// 1x1 Var replays adjoints in reverse order and accumulates into:
//   - Parameter::grad for nodes created with Tape::param
//   - the node's own grad for leaves created with requires_grad = true
// Intermediate adjoints are rebuilt on every call, so calling backward twice
// adds the same gradient twice into the sinks and nowhere else.

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmsei/numeric.hpp"

namespace cmsei {

/// A named learnable matrix with its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  /// Accumulated gradient of a requires_grad leaf (empty if never reached).
  const Matrix& grad() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(const Matrix& out_grad, std::vector<Matrix>& adjoints)>;

  /// recording = false builds values only; backward() is then unavailable.
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value);
  Var leaf(Matrix value, bool requires_grad);
  /// Constant that reads `m` in place; m must outlive the tape.
  Var view(const Matrix& m);
  /// Reads p.value in place; backward adds into p.grad. p must outlive the tape.
  Var param(Parameter& p);

  /// Records an op result. `parents` gate requires_grad; `backward` receives
  /// the output adjoint and the full adjoint table.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);

  const Matrix& value(std::size_t id) const { return *nodes_[id].view; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void backward(const Var& loss);

  /// Clears the accumulated grads of requires_grad leaves.
  void zero_leaf_grads();

 private:
  struct Node {
    Matrix own;
    const Matrix* view = nullptr;
    Matrix grad;
    Parameter* sink = nullptr;
    bool requires_grad = false;
    bool is_leaf = true;
    Backward backward;
  };

  Node& push(Node node);

  std::deque<Node> nodes_;
  bool recording_;
};

/// Adds g into adjoints[id], allocating it on first touch.
void accumulate(std::vector<Matrix>& adjoints, const Var& v, const Matrix& g);

// ---- primitives ---------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product.
Var hadamard(const Var& a, const Var& b);
/// a (MxD) plus a 1xD row broadcast over every row.
Var add_row(const Var& a, const Var& row);
/// a (MxD) times a 1xD row, broadcast elementwise over every row.
Var mul_row(const Var& a, const Var& row);
/// a (MxD) times an Mx1 column, broadcast elementwise over every column.
Var mul_col(const Var& a, const Var& col);
Var scale(const Var& a, double c);
/// Elementwise product with a constant matrix (masks).
Var mask(const Var& a, const Matrix& m);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
/// Row-wise softmax of lambda * a.
Var smoothed_softmax_rows(const Var& a, double lambda);
/// Scales each row to unit L2 norm; zero rows stay zero.
Var l2_normalize_rows(const Var& a);
/// Column mean over rows -> 1xD. Rows with mask == false are excluded.
Var mean_rows(const Var& a);
Var mean_rows(const Var& a, const std::vector<bool>& row_mask);
/// Sum over columns -> Mx1.
Var sum_cols(const Var& a);
Var sum(const Var& a);
/// Cosine between two equally sized vectors -> 1x1, clamped to [-1, 1].
Var cosine(const Var& u, const Var& v, ZeroNormPolicy policy = ZeroNormPolicy::kZero);
/// D^-1/2 A D^-1/2 with D_ii = sum_j |A_ij| + eps.
Var symmetric_normalize(const Var& a, double eps = 1e-12);
/// Arranges 1x1 scalars (row-major) into a rows x cols matrix.
Var assemble(const std::vector<Var>& scalars, Eigen::Index rows, Eigen::Index cols);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

}  // namespace cmsei
