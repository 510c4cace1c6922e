#include <doctest.h>

#include <functional>
#include <random>

#include "cmsei/autodiff.hpp"
#include "support/finite_difference.hpp"

using namespace cmsei;
using cmsei::testing::max_relative_error;
using cmsei::testing::numeric_gradient;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Builds loss = sum(op(x) .* weights) so every output entry has a distinct adjoint.
using UnaryOp = std::function<Var(const Var&)>;

double weighted_loss(const UnaryOp& op, const Matrix& x, const Matrix& w, Matrix* grad) {
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var out = op(xv);
  Var loss = sum(mask(out, w));
  if (grad != nullptr) {
    tape.backward(loss);
    *grad = xv.grad();
  }
  return loss.scalar();
}

void check_unary(const UnaryOp& op, Eigen::Index r, Eigen::Index c, Eigen::Index out_r, Eigen::Index out_c,
                 int seeds = 20) {
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(seed);
    const Matrix x = random_matrix(rng, r, c);
    const Matrix w = random_matrix(rng, out_r, out_c);
    Matrix analytic;
    weighted_loss(op, x, w, &analytic);
    const Matrix numeric =
        numeric_gradient([&](const Matrix& xx) { return weighted_loss(op, xx, w, nullptr); }, x);
    CHECK(max_relative_error(analytic, numeric) < 1e-4);
  }
}

}  // namespace

TEST_CASE("matmul values") {
  Tape tape;
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  Var id = tape.constant(Matrix::Identity(2, 2));
  Var mv = tape.constant(m);
  CHECK(matmul(id, mv).value() == m);

  Matrix ones = Matrix::Ones(2, 1);
  Matrix prod = matmul(mv, tape.constant(ones)).value();
  CHECK(prod(0, 0) == 3.0);
  CHECK(prod(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Var a = tape.constant(Matrix::Zero(2, 3));
  Var b = tape.constant(Matrix::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3 x 2x3") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum(a*b) matches finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 4, 2);
    Tape tape;
    Var av = tape.leaf(a, true);
    Var loss = sum(matmul(av, tape.constant(b)));
    tape.backward(loss);
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& x) { return (x * b).sum(); }, a);
    CHECK(max_relative_error(av.grad(), numeric) < 1e-4);
  }
}

TEST_CASE("backward simple cases") {
  SUBCASE("sum gives ones") {
    Tape tape;
    Var x = tape.leaf(Matrix::Random(3, 5), true);
    tape.backward(sum(x));
    CHECK(x.grad() == Matrix::Ones(3, 5));
  }
  SUBCASE("relu gate") {
    Tape tape;
    Matrix x0(1, 2);
    x0 << -1.0, 2.0;
    Var x = tape.leaf(x0, true);
    tape.backward(sum(relu(x)));
    CHECK(x.grad()(0, 0) == 0.0);
    CHECK(x.grad()(0, 1) == 1.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape tape;
    Var x = tape.leaf(Matrix::Ones(2, 2), true);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
  SUBCASE("repeated backward accumulates") {
    Tape tape;
    Parameter p("w", Matrix::Ones(2, 2));
    Var w = tape.param(p);
    Var loss = sum(scale(w, 3.0));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(p.grad == Matrix::Constant(2, 2, 6.0));
    p.zero_grad();
    CHECK(p.grad.isZero());
  }
  SUBCASE("non-recording tape refuses backward") {
    Tape tape(false);
    Var x = tape.leaf(Matrix::Ones(1, 1), true);
    CHECK_FALSE(x.requires_grad());
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
}

TEST_CASE("cosine values") {
  RowVector a(2), b(2), c(2);
  a << 1, 0;
  b << 0, 1;
  c << 1, 1;
  CHECK(cosine(a, a) == 1.0);
  CHECK(cosine(a, b) == 0.0);
  CHECK(cosine(c, a) == doctest::Approx(0.70710678).epsilon(1e-6));
  CHECK(cosine(RowVector::Zero(2), a) == 0.0);
  CHECK_THROWS_AS(cosine(RowVector::Zero(2), a, ZeroNormPolicy::kStrict), DegenerateVectorError);
  // Parallel vectors with rounding still clamp into range.
  RowVector big = RowVector::Constant(7, 0.1);
  const double cs = cosine(big, big * 3.0);
  CHECK(cs <= 1.0);
  CHECK(cs >= -1.0);
}

TEST_CASE("smoothed softmax values") {
  RowVector z = RowVector::Zero(3);
  const RowVector u = smoothed_softmax(z, 4.0);
  for (int i = 0; i < 3; ++i) CHECK(u(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  RowVector x(2);
  x << 1, 0;
  const RowVector y = smoothed_softmax(x, 1.0);
  CHECK(y(0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(y(1) == doctest::Approx(0.2689).epsilon(1e-4));

  RowVector s(2);
  s << 5, 1;
  const RowVector sharp = smoothed_softmax(s, 200.0);
  CHECK(sharp(0) > 1.0 - 1e-12);
  CHECK(sharp(1) >= 0.0);

  CHECK_THROWS_AS(smoothed_softmax(x, 0.0), ContractError);
}

TEST_CASE("smoothed softmax rows are positive and sum to one") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_matrix(rng, 4, 6) * 5.0;
    const Matrix p = smoothed_softmax_rows(m, 9.0);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
      CHECK((p.row(i).array() > 0.0).all());
    }
  }
}

TEST_CASE("primitive gradients match finite differences") {
  SUBCASE("transpose") { check_unary([](const Var& x) { return transpose(x); }, 3, 4, 4, 3); }
  SUBCASE("relu") { check_unary([](const Var& x) { return relu(x); }, 3, 4, 3, 4); }
  SUBCASE("tanh") { check_unary([](const Var& x) { return tanh(x); }, 3, 4, 3, 4); }
  SUBCASE("sigmoid") { check_unary([](const Var& x) { return sigmoid(x); }, 3, 4, 3, 4); }
  SUBCASE("softmax") {
    check_unary([](const Var& x) { return smoothed_softmax_rows(x, 2.5); }, 3, 5, 3, 5);
  }
  SUBCASE("l2 normalize") { check_unary([](const Var& x) { return l2_normalize_rows(x); }, 4, 3, 4, 3); }
  SUBCASE("mean rows") { check_unary([](const Var& x) { return mean_rows(x); }, 4, 3, 1, 3); }
  SUBCASE("masked mean rows") {
    check_unary([](const Var& x) { return mean_rows(x, {true, false, true, true}); }, 4, 3, 1, 3);
  }
  SUBCASE("sum cols") { check_unary([](const Var& x) { return sum_cols(x); }, 4, 3, 4, 1); }
  SUBCASE("scale") { check_unary([](const Var& x) { return scale(x, -1.7); }, 2, 3, 2, 3); }
  SUBCASE("symmetric normalize") {
    check_unary([](const Var& x) { return symmetric_normalize(x); }, 4, 4, 4, 4);
  }
  SUBCASE("self products") {
    check_unary([](const Var& x) { return matmul(x, transpose(x)); }, 3, 4, 3, 3);
    check_unary([](const Var& x) { return hadamard(x, x); }, 3, 4, 3, 4);
    check_unary([](const Var& x) { return add(x, scale(x, 2.0)); }, 3, 4, 3, 4);
    check_unary([](const Var& x) { return sub(tanh(x), x); }, 3, 4, 3, 4);
  }
  SUBCASE("row and column broadcasts") {
    check_unary(
        [](const Var& x) {
          Var row = mean_rows(x);
          return add_row(mul_row(x, row), row);
        },
        4, 3, 4, 3);
    check_unary([](const Var& x) { return mul_col(x, sum_cols(x)); }, 4, 3, 4, 3);
  }
  SUBCASE("cosine") {
    check_unary(
        [](const Var& x) {
          Tape& t = *x.tape();
          Var other = t.constant((Matrix(1, 4) << 0.3, -1.0, 2.0, 0.5).finished());
          return add(cosine(mean_rows(x), other), cosine(other, mean_rows(x)));
        },
        3, 4, 1, 1);
  }
  SUBCASE("assemble") {
    check_unary(
        [](const Var& x) {
          std::vector<Var> parts{sum(x), sum(relu(x)), sum(tanh(x)), sum(hadamard(x, x))};
          return assemble(parts, 2, 2);
        },
        2, 3, 2, 2);
  }
}

TEST_CASE("parameter nodes read in place and accumulate into the parameter") {
  Parameter p("w", (Matrix(2, 2) << 1, 2, 3, 4).finished());
  Tape tape;
  Var w = tape.param(p);
  Var x = tape.constant(Matrix::Ones(1, 2));
  tape.backward(sum(matmul(x, w)));
  CHECK(p.grad == Matrix::Ones(2, 2));
}

TEST_CASE("tape replay is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(11);
    const Matrix a = random_matrix(rng, 5, 4);
    Tape tape;
    Var x = tape.leaf(a, true);
    Var y = smoothed_softmax_rows(matmul(tanh(x), transpose(x)), 9.0);
    Var loss = sum(hadamard(y, y));
    tape.backward(loss);
    return std::make_pair(loss.scalar(), Matrix(x.grad()));
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}
