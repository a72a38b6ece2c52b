#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "relsync/types.hpp"

namespace relsync {

/// Extremal eigenvalue summary of a square matrix.
template <typename Scalar = double>
struct SpectrumReport {
  Scalar spectral_radius = 0;    // max |lambda_i|
  Scalar spectral_abscissa = 0;  // max Re(lambda_i)
  Scalar margin_used = 0;        // margin a stability check was run with
};

/// Dense Kronecker product a (x) b.
template <typename DerivedA, typename DerivedB>
MatX<typename DerivedA::Scalar> kron(const Eigen::MatrixBase<DerivedA>& a,
                                     const Eigen::MatrixBase<DerivedB>& b) {
  return Eigen::kroneckerProduct(a.derived(), b.derived()).eval();
}

/// Matrix exponential via Eigen's scaling-and-squaring Pade implementation.
/// Accuracy degrades gracefully with the input norm; for ||m|| <= 10 the
/// result matches the power series to better than 1e-10 relative.
template <typename Derived>
MatX<typename Derived::Scalar> expm(const Eigen::MatrixBase<Derived>& m) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("expm: matrix must be square");
  }
  MatX<typename Derived::Scalar> dense = m.derived();
  return dense.exp();
}

/// m^p by repeated multiplication (p is a small nonnegative integer here).
template <typename Scalar>
MatX<Scalar> matrix_power(const MatX<Scalar>& m, int p) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("matrix_power: matrix must be square");
  }
  if (p < 0) throw std::invalid_argument("matrix_power: negative exponent");
  MatX<Scalar> r = MatX<Scalar>::Identity(m.rows(), m.cols());
  for (int i = 0; i < p; ++i) r = r * m;
  return r;
}

template <typename Derived>
SpectrumReport<typename Derived::Scalar> spectrum(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  static_assert(!Eigen::NumTraits<Scalar>::IsComplex, "real matrices only");
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("spectrum: matrix must be square");
  }
  SpectrumReport<Scalar> rep;
  if (m.rows() == 0) {
    rep.spectral_abscissa = -std::numeric_limits<Scalar>::infinity();
    return rep;
  }
  Eigen::EigenSolver<MatX<Scalar>> es(m.derived(), /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("spectrum: eigenvalue iteration did not converge");
  }
  rep.spectral_radius = es.eigenvalues().cwiseAbs().maxCoeff();
  rep.spectral_abscissa = es.eigenvalues().real().maxCoeff();
  return rep;
}

/// True iff all eigenvalues satisfy |lambda| < 1 - margin.
template <typename Derived>
bool is_schur(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar margin = 0) {
  if (margin < 0) throw std::invalid_argument("is_schur: margin must be >= 0");
  return spectrum(m).spectral_radius < typename Derived::Scalar(1) - margin;
}

/// True iff all eigenvalues satisfy Re(lambda) < -margin.
template <typename Derived>
bool is_hurwitz(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar margin = 0) {
  if (margin < 0) throw std::invalid_argument("is_hurwitz: margin must be >= 0");
  return spectrum(m).spectral_abscissa < -margin;
}

/// Numerical rank: number of singular values above rel_tol * sigma_max.
/// The zero matrix (and any empty matrix) has rank 0.
template <typename Derived>
Index rank(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar rel_tol = 1e-9) {
  using Scalar = typename Derived::Scalar;
  if (!(rel_tol > Scalar(0) && rel_tol < Scalar(1))) {
    throw std::invalid_argument("rank: rel_tol must lie in (0, 1)");
  }
  if (m.rows() == 0 || m.cols() == 0) return 0;
  Eigen::JacobiSVD<MatX<Scalar>> svd(m.derived());
  const auto& sv = svd.singularValues();
  if (!(sv(0) > Scalar(0))) return 0;
  return (sv.array() > rel_tol * sv(0)).count();
}

/// Solve m x = rhs for symmetric positive definite m (Cholesky plus one step
/// of iterative refinement). Symmetry is checked to 1e-10 relative to the
/// largest entry; a nonpositive or negligible pivot throws NotSpdError.
template <typename Scalar>
MatX<Scalar> solve_spd(const MatX<Scalar>& m, const MatX<Scalar>& rhs) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("solve_spd: matrix must be square");
  }
  if (rhs.rows() != m.rows()) {
    throw std::invalid_argument("solve_spd: rhs row count mismatch");
  }
  if (m.rows() == 0) return MatX<Scalar>(0, rhs.cols());
  const Scalar scale = std::max(Scalar(1), m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-10) * scale) {
    throw NotSpdError("solve_spd: matrix is not symmetric");
  }
  Eigen::LLT<MatX<Scalar>> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NotSpdError("solve_spd: nonpositive pivot, matrix is not positive definite");
  }
  const VecX<Scalar> piv = MatX<Scalar>(llt.matrixL()).diagonal();
  const Scalar pmin = piv.minCoeff();
  const Scalar pmax = piv.maxCoeff();
  // A pivot at rounding level means the matrix is singular for our purposes.
  const Scalar floor =
      pmax * std::sqrt(Scalar(1e4) * Eigen::NumTraits<Scalar>::epsilon());
  if (!(pmin > floor)) {
    throw NotSpdError("solve_spd: negligible pivot, matrix is numerically singular");
  }
  MatX<Scalar> x = llt.solve(rhs);
  x += llt.solve(MatX<Scalar>(rhs - m * x));
  return x;
}

/// Orthonormal basis of the hyperplane orthogonal to the all-ones vector:
/// column k (1-based) is (1,...,1,-k,0,...,0)/sqrt(k(k+1)) with k ones.
template <typename Scalar = double>
MatX<Scalar> helmert_basis(int q) {
  if (q < 2) throw std::invalid_argument("helmert_basis: need q >= 2");
  MatX<Scalar> d = MatX<Scalar>::Zero(q, q - 1);
  for (int k = 1; k < q; ++k) {
    const Scalar s = Scalar(1) / std::sqrt(Scalar(k) * Scalar(k + 1));
    for (int r = 0; r < k; ++r) d(r, k - 1) = s;
    d(k, k - 1) = -Scalar(k) * s;
  }
  return d;
}

}  // namespace relsync
