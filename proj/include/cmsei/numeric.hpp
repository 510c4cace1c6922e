#pragma once

// Scalar-generic helpers shared by the differentiable ops and the plain
// evaluation paths. Everything here works on Eigen expressions.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "cmsei/errors.hpp"

namespace cmsei {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

enum class ZeroNormPolicy {
  kZero,    // degenerate inputs score 0
  kStrict,  // degenerate inputs throw DegenerateVectorError
};

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

/// Axis-aligned box in corner format (pixels, origin top-left).
template <typename Scalar>
struct Box {
  Scalar x_min{};
  Scalar y_min{};
  Scalar x_max{};
  Scalar y_max{};

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }
  Scalar width() const { return x_max - x_min; }
  Scalar height() const { return y_max - y_min; }
  Scalar area() const { return width() * height(); }

  friend bool operator==(const Box&, const Box&) = default;
};

using BoxD = Box<double>;

template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const Scalar h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= Scalar(0) || h <= Scalar(0)) return Scalar(0);
  return w * h;
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  if (inter == Scalar(0)) return Scalar(0);
  const Scalar uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

/// Cosine of the angle between two vectors of equal length, clamped to [-1, 1].
template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar cosine(const Eigen::MatrixBase<DerivedU>& u,
                                 const Eigen::MatrixBase<DerivedV>& v,
                                 ZeroNormPolicy policy = ZeroNormPolicy::kZero) {
  using Scalar = typename DerivedU::Scalar;
  if (u.size() != v.size()) {
    throw DimensionError("cosine: length mismatch " + shape_string(u) + " vs " + shape_string(v));
  }
  const Scalar nu = u.norm();
  const Scalar nv = v.norm();
  if (nu == Scalar(0) || nv == Scalar(0)) {
    if (policy == ZeroNormPolicy::kStrict) {
      throw DegenerateVectorError("cosine: zero-norm input");
    }
    return Scalar(0);
  }
  const Scalar dot = u.reshaped().dot(v.reshaped());
  return std::clamp(dot / (nu * nv), Scalar(-1), Scalar(1));
}

/// Softmax of lambda * row, computed with max subtraction.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> smoothed_softmax(
    const Eigen::MatrixBase<Derived>& row, typename Derived::Scalar lambda) {
  using Scalar = typename Derived::Scalar;
  if (!(lambda > Scalar(0))) throw ContractError("smoothed_softmax: lambda must be positive");
  const auto flat = row.reshaped().transpose();
  const Scalar peak = flat.maxCoeff();
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> e = ((flat.array() - peak) * lambda).exp().matrix();
  return e / e.sum();
}

/// Row-wise smoothed softmax of a whole matrix.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> smoothed_softmax_rows(
    const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar lambda) {
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = smoothed_softmax(m.row(i), lambda);
  return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace cmsei
