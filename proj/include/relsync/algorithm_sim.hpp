#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "relsync/array_model.hpp"
#include "relsync/gain_synthesis.hpp"
#include "relsync/types.hpp"

namespace relsync {

/// ode      — integrate the distributed algorithm's differential equations
///            per step with fixed-step RK4;
/// closedform — same update written through the solved integrals (no ODE);
/// closedloop — the explicit x/xhat recursion with precomputed K and L.
enum class SimMode { ode, closedform, closedloop };

inline const char* to_string(SimMode mode) {
  switch (mode) {
    case SimMode::ode: return "ode";
    case SimMode::closedform: return "closedform";
    case SimMode::closedloop: return "closedloop";
  }
  return "?";
}

template <typename Scalar = double>
struct AlgoState {
  long k = 0;
  VecX<Scalar> x;       // plant states, stacked
  VecX<Scalar> xhat;    // observer states, stacked
  VecX<Scalar> last_u;  // input applied at step k-1 (empty before the first step)
  VecX<Scalar> last_y;  // output measured at step k-1
};

/// Scratch vectors for the per-step integrations. Everything is zeroed at
/// the start of every discrete step; h <= 0 selects the default step
/// min(tau_c, tau_o)/2000.
template <typename Scalar = double>
struct OdeWorkspace {
  VecX<Scalar> w;
  VecX<Scalar> lambda;
  VecX<Scalar> xi;
  Scalar h = 0;
};

template <typename Scalar = double>
struct SimTrace {
  SimMode mode = SimMode::closedform;
  SynthParams<Scalar> params;
  Scalar h = 0;
  std::uint64_t seed = 0;
  std::vector<VecX<Scalar>> x;             // steps + 1 entries
  std::vector<VecX<Scalar>> xhat;          // steps + 1 entries
  std::vector<VecX<Scalar>> u;             // steps entries
  std::vector<VecX<Scalar>> y;             // steps entries
  std::vector<Scalar> delta;               // steps + 1 entries
  std::vector<Scalar> avg_residual;        // steps entries
  long steps() const { return static_cast<long>(u.size()); }
};

/// Matrices shared by every step of one simulation. The gain block (K, L,
/// xi_map) is only populated for the closed modes; the ode mode never needs
/// it and therefore also runs on arrays that fail certification.
template <typename Scalar = double>
struct SimPlan {
  BigSystem<Scalar> sys;
  ProjectionBasis<Scalar> basis;
  SynthParams<Scalar> params;
  SimMode mode = SimMode::closedform;
  MatX<Scalar> R;            // qn x (N_c P)
  MatX<Scalar> QtQ;          // qn x qn
  MatX<Scalar> A_Nc;         // A^N_c
  MatX<Scalar> A_No;         // A^N_o
  MatX<Scalar> innov_factor; // qn x M, A^(N_o-1)T C^T
  MatX<Scalar> K;            // P x qn
  MatX<Scalar> L;            // qn x M
  MatX<Scalar> xi_map;       // qn x qn, Dbig Gamma^-1 [I - e^(-Gamma tau_o)] Dbig^T
};

template <typename Scalar>
SimPlan<Scalar> make_sim_plan(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                              const SynthParams<Scalar>& params, SimMode mode) {
  params.validate(sys.n);
  SimPlan<Scalar> plan;
  plan.sys = sys;
  plan.basis = basis;
  plan.params = params;
  plan.mode = mode;
  plan.A_Nc = matrix_power(sys.A, params.N_c);
  plan.A_No = matrix_power(sys.A, params.N_o);
  plan.innov_factor =
      matrix_power(sys.A, params.N_o - 1).transpose() * sys.C.transpose();
  if (mode == SimMode::ode) {
    if (std::isinf(params.tau_c) || std::isinf(params.tau_o)) {
      throw std::invalid_argument("sim: ode mode needs finite tau");
    }
    plan.R = controllability_matrix(sys, params.N_c);
    const MatX<Scalar> q = observability_matrix(sys, params.N_o);
    plan.QtQ = q.transpose() * q;
  } else {
    const CtrlPlan<Scalar> cplan = make_ctrl_plan(sys, basis, params.N_c);
    const ObsvPlan<Scalar> oplan = make_obsv_plan(sys, basis, params.N_o);
    plan.K = feedback_gain(cplan, params.tau_c);
    plan.L = observer_gain(oplan, params.tau_o);
    const Index rn = oplan.gamma.rows();
    MatX<Scalar> i_minus_e;
    if (std::isinf(params.tau_o)) {
      i_minus_e = MatX<Scalar>::Identity(rn, rn);
    } else {
      i_minus_e = MatX<Scalar>::Identity(rn, rn) - expm((-params.tau_o) * oplan.gamma);
    }
    plan.xi_map = basis.Dbig *
                  solve_spd(oplan.gamma, MatX<Scalar>(i_minus_e * basis.Dbig.transpose()));
  }
  return plan;
}

template <typename Scalar>
Scalar default_step(const SynthParams<Scalar>& params) {
  const Scalar t = std::min(params.tau_c, params.tau_o);
  if (t > 0 && !std::isinf(t)) return t / Scalar(2000);
  const Scalar alt = std::max(params.tau_c, params.tau_o);
  if (alt > 0 && !std::isinf(alt)) return alt / Scalar(2000);
  return Scalar(1e-3);
}

namespace detail {

template <typename Scalar>
void check_finite(const VecX<Scalar>& v, long k, const char* what) {
  if (!v.allFinite() || v.norm() > Scalar(1e12)) {
    throw DivergenceError(std::string("simulation diverged at step ") + std::to_string(k) +
                          " (" + what + ")");
  }
}

}  // namespace detail

/// One step of the literal distributed algorithm: RK4-integrate the stacked
/// (w, lambda) equations over [0, tau_c], read the input off the last block
/// of w, RK4-integrate the xi equation over [0, tau_o] with the measured
/// output, then apply the discrete updates.
template <typename Scalar>
AlgoState<Scalar> step_distributed(const SimPlan<Scalar>& plan, const AlgoState<Scalar>& s,
                                   OdeWorkspace<Scalar>& ws) {
  const auto& sys = plan.sys;
  const Index qn = sys.state_dim();
  const Index p = sys.input_dim();
  const Index wdim = plan.R.cols();
  if (s.x.size() != qn || s.xhat.size() != qn) {
    throw std::invalid_argument("sim: state dimension mismatch");
  }
  const Scalar h = ws.h > 0 ? ws.h : default_step(plan.params);

  ws.w = VecX<Scalar>::Zero(wdim);
  ws.lambda = VecX<Scalar>::Zero(qn);
  ws.xi = VecX<Scalar>::Zero(qn);

  const VecX<Scalar> y = sys.C * s.x;

  // d/dt [w; lambda] = [[-I, -R^T], [R, 0]] [w; lambda] + [0; A^N_c xhat]
  {
    const VecX<Scalar> force = plan.A_Nc * s.xhat;
    const long nsub = std::max<long>(1, std::lround(plan.params.tau_c / h));
    const Scalar hh = plan.params.tau_c / Scalar(nsub);
    VecX<Scalar> k1w(wdim), k2w(wdim), k3w(wdim), k4w(wdim);
    VecX<Scalar> k1l(qn), k2l(qn), k3l(qn), k4l(qn);
    auto deriv = [&](const VecX<Scalar>& wv, const VecX<Scalar>& lv, VecX<Scalar>& dw,
                     VecX<Scalar>& dl) {
      dw.noalias() = -(plan.R.transpose() * lv);
      dw -= wv;
      dl.noalias() = plan.R * wv;
      dl += force;
    };
    for (long i = 0; i < nsub; ++i) {
      deriv(ws.w, ws.lambda, k1w, k1l);
      deriv(ws.w + (hh / 2) * k1w, ws.lambda + (hh / 2) * k1l, k2w, k2l);
      deriv(ws.w + (hh / 2) * k2w, ws.lambda + (hh / 2) * k2l, k3w, k3l);
      deriv(ws.w + hh * k3w, ws.lambda + hh * k3l, k4w, k4l);
      ws.w += (hh / 6) * (k1w + 2 * k2w + 2 * k3w + k4w);
      ws.lambda += (hh / 6) * (k1l + 2 * k2l + 2 * k3l + k4l);
    }
    detail::check_finite(ws.w, s.k, "w integration");
  }
  const VecX<Scalar> u = ws.w.tail(p);

  // d/dt xi = -Q^T Q xi + A^(N_o-1)T C^T (y - C xhat)
  {
    const VecX<Scalar> beta = plan.innov_factor * (y - sys.C * s.xhat);
    const long nsub = std::max<long>(1, std::lround(plan.params.tau_o / h));
    const Scalar hh = plan.params.tau_o / Scalar(nsub);
    VecX<Scalar> k1(qn), k2(qn), k3(qn), k4(qn);
    auto deriv = [&](const VecX<Scalar>& v, VecX<Scalar>& d) {
      d.noalias() = -(plan.QtQ * v);
      d += beta;
    };
    for (long i = 0; i < nsub; ++i) {
      deriv(ws.xi, k1);
      deriv(ws.xi + (hh / 2) * k1, k2);
      deriv(ws.xi + (hh / 2) * k2, k3);
      deriv(ws.xi + hh * k3, k4);
      ws.xi += (hh / 6) * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    detail::check_finite(ws.xi, s.k, "xi integration");
  }

  AlgoState<Scalar> next;
  next.k = s.k + 1;
  next.x = sys.A * s.x + sys.B * u;
  next.xhat = sys.A * s.xhat + plan.A_No * ws.xi + sys.B * u;
  next.last_u = u;
  next.last_y = y;
  detail::check_finite(next.x, next.k, "state");
  detail::check_finite(next.xhat, next.k, "observer state");
  return next;
}

/// Same contract as step_distributed but with the integrals replaced by
/// their solved forms: u = -K xhat and xi(tau_o) through the innovation map.
template <typename Scalar>
AlgoState<Scalar> step_closed_form(const SimPlan<Scalar>& plan, const AlgoState<Scalar>& s) {
  const auto& sys = plan.sys;
  if (s.x.size() != sys.state_dim() || s.xhat.size() != sys.state_dim()) {
    throw std::invalid_argument("sim: state dimension mismatch");
  }
  const VecX<Scalar> y = sys.C * s.x;
  const VecX<Scalar> u = -(plan.K * s.xhat);
  const VecX<Scalar> xi = plan.xi_map * (plan.innov_factor * (y - sys.C * s.xhat));

  AlgoState<Scalar> next;
  next.k = s.k + 1;
  next.x = sys.A * s.x + sys.B * u;
  next.xhat = sys.A * s.xhat + plan.A_No * xi + sys.B * u;
  next.last_u = u;
  next.last_y = y;
  detail::check_finite(next.x, next.k, "state");
  detail::check_finite(next.xhat, next.k, "observer state");
  return next;
}

/// The explicit closed loop: x+ = A x - B K xhat,
/// xhat+ = A xhat - B K xhat + L (C x - C xhat).
template <typename Scalar>
AlgoState<Scalar> step_closed_loop(const SimPlan<Scalar>& plan, const AlgoState<Scalar>& s) {
  const auto& sys = plan.sys;
  if (s.x.size() != sys.state_dim() || s.xhat.size() != sys.state_dim()) {
    throw std::invalid_argument("sim: state dimension mismatch");
  }
  const VecX<Scalar> y = sys.C * s.x;
  const VecX<Scalar> u = -(plan.K * s.xhat);

  AlgoState<Scalar> next;
  next.k = s.k + 1;
  next.x = sys.A * s.x + sys.B * u;
  next.xhat = sys.A * s.xhat + sys.B * u + plan.L * (y - sys.C * s.xhat);
  next.last_u = u;
  next.last_y = y;
  detail::check_finite(next.x, next.k, "state");
  detail::check_finite(next.xhat, next.k, "observer state");
  return next;
}

template <typename Scalar>
AlgoState<Scalar> advance(const SimPlan<Scalar>& plan, const AlgoState<Scalar>& s,
                          OdeWorkspace<Scalar>& ws) {
  switch (plan.mode) {
    case SimMode::ode: return step_distributed(plan, s, ws);
    case SimMode::closedform: return step_closed_form(plan, s);
    case SimMode::closedloop: return step_closed_loop(plan, s);
  }
  throw std::logic_error("sim: unknown mode");
}

template <typename Scalar>
SimTrace<Scalar> run(const SimPlan<Scalar>& plan, const VecX<Scalar>& x0,
                     const VecX<Scalar>& xhat0, long steps, Scalar h = 0) {
  if (steps < 1) throw std::invalid_argument("sim: steps must be >= 1");
  const auto& sys = plan.sys;
  const Index n = sys.n;
  const MatX<Scalar> a_agent = sys.A.topLeftCorner(n, n);

  SimTrace<Scalar> trace;
  trace.mode = plan.mode;
  trace.params = plan.params;
  trace.h = h > 0 ? h : default_step(plan.params);
  trace.x.reserve(steps + 1);
  trace.xhat.reserve(steps + 1);

  OdeWorkspace<Scalar> ws;
  ws.h = h;
  AlgoState<Scalar> state;
  state.x = x0;
  state.xhat = xhat0;

  trace.x.push_back(state.x);
  trace.xhat.push_back(state.xhat);
  trace.delta.push_back(disagreement_norm(plan.basis, state.x));
  for (long k = 0; k < steps; ++k) {
    const VecX<Scalar> avg_before = plan.basis.Sbig.transpose() * state.x;
    state = advance(plan, state, ws);
    const VecX<Scalar> avg_after = plan.basis.Sbig.transpose() * state.x;
    trace.avg_residual.push_back((avg_after - a_agent * avg_before).norm());
    trace.u.push_back(state.last_u);
    trace.y.push_back(state.last_y);
    trace.x.push_back(state.x);
    trace.xhat.push_back(state.xhat);
    trace.delta.push_back(disagreement_norm(plan.basis, state.x));
  }
  return trace;
}

template <typename Scalar>
SimTrace<Scalar> run(const BigSystem<Scalar>& sys, const ProjectionBasis<Scalar>& basis,
                     const SynthParams<Scalar>& params, SimMode mode, const VecX<Scalar>& x0,
                     const VecX<Scalar>& xhat0, long steps, Scalar h = 0) {
  return run(make_sim_plan(sys, basis, params, mode), x0, xhat0, steps, h);
}

}  // namespace relsync
