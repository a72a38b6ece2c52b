#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "relsync/array_model.hpp"
#include "relsync/matkernel.hpp"
#include "relsync/types.hpp"

namespace relsync {

/// The four design parameters of the synchronization algorithm plus the
/// Schur margin used when certifying the closed loop. Horizons must be at
/// least the agent order n. The tau values may be +infinity, which selects
/// the limit gains (the matrix exponentials are replaced by zero exactly);
/// tau = 0 is tolerated here and yields zero gains, though scenario configs
/// insist on strictly positive values.
template <typename Scalar = double>
struct SynthParams {
  int N_c = 1;
  int N_o = 1;
  Scalar tau_c = 1;
  Scalar tau_o = 1;
  Scalar schur_margin = 1e-6;

  void validate(int n) const {
    if (N_c < n) throw std::invalid_argument("params: N_c must be >= n");
    if (N_o < n) throw std::invalid_argument("params: N_o must be >= n");
    if (!(tau_c >= 0)) throw std::invalid_argument("params: tau_c must be >= 0");
    if (!(tau_o >= 0)) throw std::invalid_argument("params: tau_o must be >= 0");
    if (!(schur_margin >= 0)) throw std::invalid_argument("params: margin must be >= 0");
  }
};

/// Drift matrix of the input-generating ODE restricted to the disagreement
/// subspace: [[-I, -R^T Dbig], [Dbig^T R, 0]]. Hurwitz iff controllable.
template <typename Scalar>
MatX<Scalar> lambda_matrix(const ProjectionBasis<Scalar>& basis, const MatX<Scalar>& R) {
  const Index w = R.cols();
  const Index r = basis.Dbig.cols();
  MatX<Scalar> lam = MatX<Scalar>::Zero(w + r, w + r);
  lam.topLeftCorner(w, w) = -MatX<Scalar>::Identity(w, w);
  lam.topRightCorner(w, r) = -(R.transpose() * basis.Dbig);
  lam.bottomLeftCorner(r, w) = basis.Dbig.transpose() * R;
  return lam;
}

/// Gramian-like matrix Dbig^T Q^T Q Dbig; symmetric positive definite
/// exactly when the array is observable.
template <typename Scalar>
MatX<Scalar> gamma_matrix(const ProjectionBasis<Scalar>& basis, const MatX<Scalar>& Q) {
  const MatX<Scalar> qd = Q * basis.Dbig;
  return qd.transpose() * qd;
}

/// Precomputed factors shared by the feedback gain, its horizon residual
/// theta_c, and the tau threshold search.
template <typename Scalar = double>
struct CtrlPlan {
  int N_c = 0;
  MatX<Scalar> R;        // qn x (N_c P)
  MatX<Scalar> lambda;   // (N_c P + rn) square
  MatX<Scalar> F;        // P x (N_c P + rn), left factor of the gain formula
  MatX<Scalar> Fr;       // rn x (N_c P + rn), Dbig^T B times F
  MatX<Scalar> DtANc;    // rn x qn, Dbig^T A^N_c
  MatX<Scalar> ArNc;     // rn x rn, Dbig^T A^N_c Dbig
};

template <typename Scalar>
CtrlPlan<Scalar> make_ctrl_plan(const BigSystem<Scalar>& sys,
                                const ProjectionBasis<Scalar>& basis, int N_c) {
  if (N_c < 1) throw std::invalid_argument("ctrl plan: N_c must be >= 1");
  CtrlPlan<Scalar> plan;
  plan.N_c = N_c;
  plan.R = controllability_matrix(sys, N_c);
  plan.lambda = lambda_matrix(basis, plan.R);

  const auto& D = basis.Dbig;
  const Index p = sys.input_dim();
  const Index w = plan.R.cols();
  const Index rn = D.cols();

  const MatX<Scalar> DtR = D.transpose() * plan.R;      // rn x w
  const MatX<Scalar> gram = DtR * DtR.transpose();      // Dbig^T R R^T Dbig
  const MatX<Scalar> a_prev = matrix_power(sys.A, N_c - 1);
  const MatX<Scalar> m1 = (D.transpose() * (a_prev * sys.B)).transpose();  // P x rn
  // m1 * gram^-1 via the SPD solve; failure here signals uncontrollability.
  const MatX<Scalar> m1g = solve_spd(gram, MatX<Scalar>(m1.transpose())).transpose();

  plan.F.resize(p, w + rn);
  plan.F.leftCols(w) = m1g * DtR;
  if (p > 0 && w >= p) {
    // subtract the selector that picks the last input block of the w stack
    plan.F.block(0, w - p, p, p) -= MatX<Scalar>::Identity(p, p);
  }
  plan.F.rightCols(rn) = m1g;
  plan.Fr = (D.transpose() * sys.B) * plan.F;
  plan.DtANc = D.transpose() * matrix_power(sys.A, N_c);
  plan.ArNc = plan.DtANc * D;
  return plan;
}

/// Feedback gain K(tau): u = -K xhat reproduces the input the distributed
/// ODE emits after integrating for tau. tau = +infinity gives the limit gain.
template <typename Scalar>
MatX<Scalar> feedback_gain(const CtrlPlan<Scalar>& plan, Scalar tau) {
  const Index dim = plan.lambda.rows();
  const Index rn = plan.ArNc.rows();
  MatX<Scalar> i_minus_e;
  if (std::isinf(tau)) {
    i_minus_e = MatX<Scalar>::Identity(dim, dim);
  } else {
    i_minus_e = MatX<Scalar>::Identity(dim, dim) - expm(plan.lambda * tau);
  }
  return plan.F * (i_minus_e.rightCols(rn) * plan.DtANc);
}

template <typename Scalar>
MatX<Scalar> feedback_gain(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                           const SynthParams<Scalar>& params) {
  return feedback_gain(make_ctrl_plan(sys, basis, params.N_c), params.tau_c);
}

/// Perturbation of the reduced feedback block caused by integrating only to
/// a finite tau; decays to zero as tau grows because lambda is Hurwitz.
template <typename Scalar>
MatX<Scalar> theta_ctrl(const CtrlPlan<Scalar>& plan, Scalar tau) {
  const Index rn = plan.ArNc.rows();
  if (std::isinf(tau)) return MatX<Scalar>::Zero(rn, rn);
  const MatX<Scalar> e = expm(plan.lambda * tau);
  return plan.Fr * (e.rightCols(rn) * plan.ArNc);
}

template <typename Scalar>
MatX<Scalar> theta_ctrl(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                        const SynthParams<Scalar>& params, Scalar tau) {
  return theta_ctrl(make_ctrl_plan(sys, basis, params.N_c), tau);
}

/// Precomputed factors shared by the observer gain, theta_o, and the
/// closed-form innovation map of the simulator.
template <typename Scalar = double>
struct ObsvPlan {
  int N_o = 0;
  MatX<Scalar> Q;            // (N_o M) x qn
  MatX<Scalar> gamma;        // rn x rn
  MatX<Scalar> beta_factor;  // rn x M, Dbig^T A^(N_o-1)T C^T
  MatX<Scalar> ANoD;         // qn x rn, A^N_o Dbig
  MatX<Scalar> ArNo;         // rn x rn, Dbig^T A^N_o Dbig
  MatX<Scalar> Mo2;          // rn x rn, beta_factor C Dbig
};

template <typename Scalar>
ObsvPlan<Scalar> make_obsv_plan(const BigSystem<Scalar>& sys,
                                const ProjectionBasis<Scalar>& basis, int N_o) {
  if (N_o < 1) throw std::invalid_argument("obsv plan: N_o must be >= 1");
  ObsvPlan<Scalar> plan;
  plan.N_o = N_o;
  plan.Q = observability_matrix(sys, N_o);
  plan.gamma = gamma_matrix(basis, plan.Q);
  const auto& D = basis.Dbig;
  plan.beta_factor =
      D.transpose() * matrix_power(sys.A, N_o - 1).transpose() * sys.C.transpose();
  plan.ANoD = matrix_power(sys.A, N_o) * D;
  plan.ArNo = D.transpose() * plan.ANoD;
  plan.Mo2 = plan.beta_factor * (sys.C * D);
  return plan;
}

/// Observer gain L(tau): xhat+ = A xhat - B K xhat + L (y - C xhat).
template <typename Scalar>
MatX<Scalar> observer_gain(const ObsvPlan<Scalar>& plan, Scalar tau) {
  const Index rn = plan.gamma.rows();
  MatX<Scalar> i_minus_e;
  if (std::isinf(tau)) {
    i_minus_e = MatX<Scalar>::Identity(rn, rn);
  } else {
    i_minus_e = MatX<Scalar>::Identity(rn, rn) - expm((-tau) * plan.gamma);
  }
  return plan.ANoD * solve_spd(plan.gamma, MatX<Scalar>(i_minus_e * plan.beta_factor));
}

template <typename Scalar>
MatX<Scalar> observer_gain(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                           const SynthParams<Scalar>& params) {
  return observer_gain(make_obsv_plan(sys, basis, params.N_o), params.tau_o);
}

template <typename Scalar>
MatX<Scalar> theta_obsv(const ObsvPlan<Scalar>& plan, Scalar tau) {
  const Index rn = plan.gamma.rows();
  if (std::isinf(tau)) return MatX<Scalar>::Zero(rn, rn);
  const MatX<Scalar> e = expm((-tau) * plan.gamma);
  return plan.ArNo * solve_spd(plan.gamma, MatX<Scalar>(e * plan.Mo2));
}

template <typename Scalar>
MatX<Scalar> theta_obsv(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                        const SynthParams<Scalar>& params, Scalar tau) {
  return theta_obsv(make_obsv_plan(sys, basis, params.N_o), tau);
}

/// Deadbeat-style gains built from finite Gramian sums of the reduced
/// system; both matrices are Schur whenever the corresponding rank condition
/// holds (a singular sum throws NotSpdError instead).
template <typename Scalar>
std::pair<MatX<Scalar>, MatX<Scalar>> kleinman_gains(const ReducedSystem<Scalar>& red,
                                                     int N_c, int N_o) {
  if (N_c < 1 || N_o < 1) throw std::invalid_argument("kleinman: horizons must be >= 1");
  const Index rn = red.A.rows();

  MatX<Scalar> w_c = MatX<Scalar>::Zero(rn, rn);
  MatX<Scalar> blk = red.B;
  for (int l = 0; l < N_c; ++l) {
    w_c += blk * blk.transpose();
    if (l + 1 < N_c) blk = red.A * blk;
  }
  // after the loop blk = A^(N_c-1) B, so B B^T A^(N_c-1)T = B blk^T
  const MatX<Scalar> h_c =
      red.A - (red.B * blk.transpose()) * solve_spd(w_c, matrix_power(red.A, N_c));

  MatX<Scalar> w_o = MatX<Scalar>::Zero(rn, rn);
  MatX<Scalar> cblk = red.C;
  for (int l = 0; l < N_o; ++l) {
    w_o += cblk.transpose() * cblk;
    if (l + 1 < N_o) cblk = cblk * red.A;
  }
  const MatX<Scalar> h_o =
      red.A -
      matrix_power(red.A, N_o) * solve_spd(w_o, MatX<Scalar>(cblk.transpose() * red.C));

  return {h_c, h_o};
}

/// System matrix of the reduced (disagreement, estimation-error) pair:
/// [[A_r - B_r K_r, -B_r K_r], [0, A_r - L_r C_r]].
template <typename Scalar>
MatX<Scalar> reduced_closed_loop(const ReducedSystem<Scalar>& red, const MatX<Scalar>& K_r,
                                 const MatX<Scalar>& L_r) {
  const Index rn = red.A.rows();
  MatX<Scalar> phi = MatX<Scalar>::Zero(2 * rn, 2 * rn);
  const MatX<Scalar> bk = red.B * K_r;
  phi.topLeftCorner(rn, rn) = red.A - bk;
  phi.topRightCorner(rn, rn) = -bk;
  phi.bottomRightCorner(rn, rn) = red.A - L_r * red.C;
  return phi;
}

enum class TauKind { control, observe };

template <typename Scalar = double>
struct ThresholdOptions {
  Scalar margin = 1e-6;
  Scalar tau0 = 0.125;
  Scalar tau_max = 1e4;
};

/// Smallest integration horizon (on a doubling grid refined by 20 bisection
/// steps) whose residual keeps the reduced block Schur with the requested
/// margin. theta(tau) is not monotone in general, so a candidate must also
/// stay Schur at the three following grid probes 2 tau, 4 tau, 8 tau.
template <typename Scalar>
Scalar find_tau_threshold(TauKind kind, const BigSystem<Scalar>& sys,
                          const ProjectionBasis<Scalar>& basis,
                          const SynthParams<Scalar>& params,
                          const ThresholdOptions<Scalar>& opt = {}) {
  if (!(opt.tau0 > 0) || !(opt.tau_max >= opt.tau0)) {
    throw std::invalid_argument("threshold search: bad tau grid");
  }
  const ReducedSystem<Scalar> red = reduce(sys, basis);
  const auto gains = kleinman_gains(red, params.N_c, params.N_o);
  const MatX<Scalar> h = (kind == TauKind::control) ? gains.first : gains.second;

  CtrlPlan<Scalar> cplan;
  ObsvPlan<Scalar> oplan;
  if (kind == TauKind::control) {
    cplan = make_ctrl_plan(sys, basis, params.N_c);
  } else {
    oplan = make_obsv_plan(sys, basis, params.N_o);
  }
  auto schur_at = [&](Scalar tau) {
    const MatX<Scalar> th =
        (kind == TauKind::control) ? theta_ctrl(cplan, tau) : theta_obsv(oplan, tau);
    return is_schur(MatX<Scalar>(h + th), opt.margin);
  };
  auto accept = [&](Scalar tau) {
    return schur_at(tau) && schur_at(2 * tau) && schur_at(4 * tau) && schur_at(8 * tau);
  };

  Scalar lo = 0;
  Scalar hi = -1;
  for (Scalar tau = opt.tau0; tau <= opt.tau_max; tau *= 2) {
    if (accept(tau)) {
      hi = tau;
      break;
    }
    lo = tau;
  }
  if (hi < 0) {
    throw NoThresholdError("threshold search: no tau below tau_max certifies the margin");
  }
  if (lo == 0) return hi;  // already Schur at the first grid point
  for (int it = 0; it < 20; ++it) {
    const Scalar mid = (lo + hi) / 2;
    if (accept(mid)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

/// Everything the synthesis produces for one parameter set. rho_c and rho_o
/// are the spectral radii of the reduced feedback and observer blocks built
/// from the same K and L a simulation would use; rho_phi is the radius of
/// the block-triangular pair matrix.
template <typename Scalar = double>
struct GainSet {
  MatX<Scalar> R;
  MatX<Scalar> Lambda;
  MatX<Scalar> Q;
  MatX<Scalar> Gamma;
  MatX<Scalar> K;
  MatX<Scalar> L;
  MatX<Scalar> K_r;
  MatX<Scalar> L_r;
  MatX<Scalar> H_c;
  MatX<Scalar> H_o;
  MatX<Scalar> theta_c;  // evaluated at tau_c
  MatX<Scalar> theta_o;  // evaluated at tau_o
  MatX<Scalar> Phi_r;
  Scalar rho_c = 0;
  Scalar rho_o = 0;
  Scalar rho_phi = 0;
};

template <typename Scalar>
GainSet<Scalar> synthesize(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                           const SynthParams<Scalar>& params) {
  GainSet<Scalar> g;
  const CtrlPlan<Scalar> cplan = make_ctrl_plan(sys, basis, params.N_c);
  const ObsvPlan<Scalar> oplan = make_obsv_plan(sys, basis, params.N_o);
  const ReducedSystem<Scalar> red = reduce(sys, basis);

  g.R = cplan.R;
  g.Lambda = cplan.lambda;
  g.Q = oplan.Q;
  g.Gamma = oplan.gamma;
  g.K = feedback_gain(cplan, params.tau_c);
  g.L = observer_gain(oplan, params.tau_o);
  g.K_r = g.K * basis.Dbig;
  g.L_r = basis.Dbig.transpose() * g.L;
  auto kleinman = kleinman_gains(red, params.N_c, params.N_o);
  g.H_c = std::move(kleinman.first);
  g.H_o = std::move(kleinman.second);
  g.theta_c = theta_ctrl(cplan, params.tau_c);
  g.theta_o = theta_obsv(oplan, params.tau_o);
  g.Phi_r = reduced_closed_loop(red, g.K_r, g.L_r);
  g.rho_c = spectrum(MatX<Scalar>(red.A - red.B * g.K_r)).spectral_radius;
  g.rho_o = spectrum(MatX<Scalar>(red.A - g.L_r * red.C)).spectral_radius;
  g.rho_phi = spectrum(g.Phi_r).spectral_radius;
  return g;
}

}  // namespace relsync
