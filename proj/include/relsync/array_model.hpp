#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "relsync/matkernel.hpp"
#include "relsync/types.hpp"

namespace relsync {

/// One coupled pair of agents. Only i < j is stored; the partner matrices
/// B_ji = -B_ij and C_ji = -C_ij are implied and never materialized. B may
/// have zero columns (output-only pair) and C zero rows (input-only pair).
template <typename Scalar = double>
struct Coupling {
  int i = 0;       // 1-based agent indices, i < j
  int j = 0;
  MatX<Scalar> B;  // n x p_ij
  MatX<Scalar> C;  // m_ij x n
};

/// An array of q identical discrete-time agents x_i+ = A x_i + sum_j B_ij u_ij
/// with relative outputs y_ij = C_ij (x_i - x_j).
template <typename Scalar = double>
struct ArraySpec {
  int q = 0;
  int n = 0;
  MatX<Scalar> A;
  std::vector<Coupling<Scalar>> couplings;

  void validate() const {
    if (q < 2) throw std::invalid_argument("array: q must be >= 2");
    if (n < 1) throw std::invalid_argument("array: n must be >= 1");
    if (A.rows() != n || A.cols() != n) {
      throw std::invalid_argument("array: A must be " + std::to_string(n) + "x" +
                                  std::to_string(n));
    }
    if (!A.allFinite()) throw std::invalid_argument("array: A has nonfinite entries");
    std::vector<std::pair<int, int>> seen;
    for (const auto& c : couplings) {
      const std::string tag =
          "coupling (" + std::to_string(c.i) + "," + std::to_string(c.j) + ")";
      if (c.i < 1 || c.j > q || c.i >= c.j) {
        throw std::invalid_argument(tag + ": indices must satisfy 1 <= i < j <= q");
      }
      if (c.B.size() > 0 || c.B.cols() > 0) {
        if (c.B.rows() != n) {
          throw std::invalid_argument(tag + ": B must have " + std::to_string(n) +
                                      " row(s), got " + std::to_string(c.B.rows()));
        }
      }
      if (c.C.size() > 0 || c.C.rows() > 0) {
        if (c.C.cols() != n) {
          throw std::invalid_argument(tag + ": C must have " + std::to_string(n) +
                                      " column(s), got " + std::to_string(c.C.cols()));
        }
      }
      if (!c.B.allFinite() || !c.C.allFinite()) {
        throw std::invalid_argument(tag + ": nonfinite entries");
      }
      if (std::find(seen.begin(), seen.end(), std::make_pair(c.i, c.j)) != seen.end()) {
        throw std::invalid_argument(tag + ": duplicate pair");
      }
      seen.emplace_back(c.i, c.j);
    }
  }
};

/// Offsets of one coupled pair inside the stacked input/output vectors.
struct PairBlock {
  int i = 0;
  int j = 0;
  Index input_offset = 0;   // column range of the pair inside B
  Index input_width = 0;    // p_ij
  Index output_offset = 0;  // row range of the pair inside C
  Index output_height = 0;  // m_ij
};

/// The stacked system x+ = A x + B u, y = C x with A = I_q (x) A_agent and
/// B, C carrying the +/- incidence-style pair blocks in lexicographic pair
/// order (1,2),(1,3),...,(q-1,q).
template <typename Scalar = double>
struct BigSystem {
  int q = 0;
  int n = 0;
  MatX<Scalar> A;  // qn x qn
  MatX<Scalar> B;  // qn x P
  MatX<Scalar> C;  // M x qn
  std::vector<PairBlock> blocks;

  Index state_dim() const { return static_cast<Index>(q) * n; }
  Index input_dim() const { return B.cols(); }
  Index output_dim() const { return C.rows(); }

  const PairBlock& block(int i, int j) const {
    for (const auto& b : blocks) {
      if (b.i == i && b.j == j) return b;
    }
    throw std::out_of_range("big system: pair (" + std::to_string(i) + "," +
                            std::to_string(j) + ") has no coupling");
  }
};

/// Orthonormal split of R^(qn) into the synchronization subspace (columns of
/// Sbig) and the disagreement subspace (columns of Dbig).
template <typename Scalar = double>
struct ProjectionBasis {
  int q = 0;
  int n = 0;
  VecX<Scalar> S;     // 1_q / sqrt(q)
  MatX<Scalar> D;     // q x (q-1) Helmert basis
  MatX<Scalar> Sbig;  // S (x) I_n, qn x n
  MatX<Scalar> Dbig;  // D (x) I_n, qn x (q-1)n
};

template <typename Scalar = double>
ProjectionBasis<Scalar> make_projection_basis(int q, int n) {
  if (q < 2 || n < 1) throw std::invalid_argument("projection basis: need q >= 2, n >= 1");
  ProjectionBasis<Scalar> b;
  b.q = q;
  b.n = n;
  b.S = VecX<Scalar>::Constant(q, Scalar(1) / std::sqrt(Scalar(q)));
  b.D = helmert_basis<Scalar>(q);
  const MatX<Scalar> eye = MatX<Scalar>::Identity(n, n);
  b.Sbig = kron(b.S, eye);
  b.Dbig = kron(b.D, eye);
  return b;
}

/// The dynamics restricted to the disagreement subspace.
template <typename Scalar = double>
struct ReducedSystem {
  MatX<Scalar> A;  // Dbig^T A Dbig, (q-1)n square
  MatX<Scalar> B;  // Dbig^T B
  MatX<Scalar> C;  // C Dbig
};

template <typename Scalar>
BigSystem<Scalar> assemble(const ArraySpec<Scalar>& spec) {
  spec.validate();
  BigSystem<Scalar> sys;
  sys.q = spec.q;
  sys.n = spec.n;
  const Index n = spec.n;
  const Index qn = static_cast<Index>(spec.q) * n;

  std::vector<const Coupling<Scalar>*> ordered;
  ordered.reserve(spec.couplings.size());
  for (const auto& c : spec.couplings) ordered.push_back(&c);
  std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) {
    return std::make_pair(a->i, a->j) < std::make_pair(b->i, b->j);
  });

  Index total_p = 0;
  Index total_m = 0;
  for (const auto* c : ordered) {
    PairBlock blk;
    blk.i = c->i;
    blk.j = c->j;
    blk.input_offset = total_p;
    blk.input_width = c->B.cols();
    blk.output_offset = total_m;
    blk.output_height = c->C.rows();
    total_p += blk.input_width;
    total_m += blk.output_height;
    sys.blocks.push_back(blk);
  }

  sys.A = kron(MatX<Scalar>::Identity(spec.q, spec.q), spec.A);
  sys.B = MatX<Scalar>::Zero(qn, total_p);
  sys.C = MatX<Scalar>::Zero(total_m, qn);
  for (std::size_t idx = 0; idx < ordered.size(); ++idx) {
    const auto& c = *ordered[idx];
    const auto& blk = sys.blocks[idx];
    const Index row_i = static_cast<Index>(c.i - 1) * n;
    const Index row_j = static_cast<Index>(c.j - 1) * n;
    if (blk.input_width > 0) {
      sys.B.block(row_i, blk.input_offset, n, blk.input_width) = c.B;
      sys.B.block(row_j, blk.input_offset, n, blk.input_width) = -c.B;
    }
    if (blk.output_height > 0) {
      sys.C.block(blk.output_offset, row_i, blk.output_height, n) = c.C;
      sys.C.block(blk.output_offset, row_j, blk.output_height, n) = -c.C;
    }
  }
  return sys;
}

/// [B  AB  ...  A^(horizon-1) B]
template <typename Scalar>
MatX<Scalar> controllability_matrix(const BigSystem<Scalar>& sys, int horizon) {
  if (horizon < 1) throw std::invalid_argument("controllability_matrix: horizon >= 1");
  const Index p = sys.input_dim();
  MatX<Scalar> w(sys.state_dim(), horizon * p);
  MatX<Scalar> blk = sys.B;
  for (int l = 0; l < horizon; ++l) {
    w.middleCols(l * p, p) = blk;
    if (l + 1 < horizon) blk = sys.A * blk;
  }
  return w;
}

/// Rows C, CA, ..., C A^(horizon-1) stacked top to bottom.
template <typename Scalar>
MatX<Scalar> observability_matrix(const BigSystem<Scalar>& sys, int horizon) {
  if (horizon < 1) throw std::invalid_argument("observability_matrix: horizon >= 1");
  const Index m = sys.output_dim();
  MatX<Scalar> w(horizon * m, sys.state_dim());
  MatX<Scalar> blk = sys.C;
  for (int l = 0; l < horizon; ++l) {
    w.middleRows(l * m, m) = blk;
    if (l + 1 < horizon) blk = blk * sys.A;
  }
  return w;
}

// The range of the controllability matrix always lies inside the disagreement
// subspace, so relative controllability is equivalent to its rank reaching
// (q-1)n; dually for observability. This is the only machine-checkable form
// of the range/null-space definitions.
template <typename Scalar>
bool is_controllable(const BigSystem<Scalar>& sys, Scalar rel_tol = 1e-9) {
  const Index target = static_cast<Index>(sys.q - 1) * sys.n;
  return rank(controllability_matrix(sys, sys.n), rel_tol) == target;
}

template <typename Scalar>
bool is_observable(const BigSystem<Scalar>& sys, Scalar rel_tol = 1e-9) {
  const Index target = static_cast<Index>(sys.q - 1) * sys.n;
  return rank(observability_matrix(sys, sys.n), rel_tol) == target;
}

template <typename Scalar>
bool is_controllable(const ArraySpec<Scalar>& spec, Scalar rel_tol = 1e-9) {
  return is_controllable(assemble(spec), rel_tol);
}

template <typename Scalar>
bool is_observable(const ArraySpec<Scalar>& spec, Scalar rel_tol = 1e-9) {
  return is_observable(assemble(spec), rel_tol);
}

template <typename Scalar>
ReducedSystem<Scalar> reduce(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis) {
  ReducedSystem<Scalar> r;
  r.A = basis.Dbig.transpose() * sys.A * basis.Dbig;
  r.B = basis.Dbig.transpose() * sys.B;
  r.C = sys.C * basis.Dbig;
  return r;
}

/// Euclidean distance from x to the synchronization subspace.
template <typename Scalar, typename Derived>
Scalar disagreement_norm(const ProjectionBasis<Scalar>& basis,
                         const Eigen::MatrixBase<Derived>& x) {
  return (basis.Dbig.transpose() * x.derived()).norm();
}

}  // namespace relsync
