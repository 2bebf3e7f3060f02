"""Independent gradient oracles and theorem checkers.

Nothing in here reuses the estimators it is meant to verify: finite
differences perturb parameters and re-relax; BPTT reverse-differentiates the
unrolled dynamics; the linearized-backprop ODE integrates the adjoint system
from the analytic Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from .energy_models import CostFn, EnergyModel, PrimitiveModel
from .eqprop_core import RelaxConfig, relax_free, relax_nudged
from .params import ParamSet


class PreconditionError(RuntimeError):
    """The free phase had not settled for the trailing steps the step-by-step
    comparison needs; the reported errors would be meaningless."""


def _rel(err_vec: np.ndarray, ref_vec: np.ndarray, floor: float = 1e-12) -> float:
    return float(np.linalg.norm(err_vec) / max(np.linalg.norm(ref_vec), floor))


def _loss(model, params, x, y, cost: CostFn, cfg: RelaxConfig,
          s0=None) -> float:
    free = relax_free(model, params, x, cfg, s0=s0)
    return float(np.mean(cost.cost(free.state[-1], np.atleast_2d(y))))


def finite_diff_loss_grad(model, params: ParamSet, x, y, cost: CostFn,
                          cfg: RelaxConfig, h: float = 1e-5,
                          s0=None) -> ParamSet:
    """Central difference of L(theta) = C(s*(theta), y) per scalar parameter,
    re-relaxing at every perturbation. Pass the unperturbed fixed point as
    `s0` to warm-start each relaxation; every perturbed system still iterates
    to its own fixed point at the configured tolerance."""
    out = ParamSet()
    for name in params:
        t = params[name]
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            pp = params.copy()
            pp[name][idx] += h
            lp = _loss(model, pp, x, y, cost, cfg, s0=s0)
            pp[name][idx] -= 2 * h
            lm = _loss(model, pp, x, y, cost, cfg, s0=s0)
            g[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# BPTT on the unrolled discrete-time dynamics

@dataclass
class BpttResult:
    #: dL/ds_t for t = 0..T (flattened states)
    state_step_grads: List[np.ndarray]
    #: dL/dtheta_t for t = 1..T (parameter of step t under weight sharing)
    theta_step_grads: List[ParamSet]
    #: sum over steps = dL/dtheta
    total: ParamSet


def bptt_grads(model: PrimitiveModel, params: ParamSet, x, y, cost: CostFn,
               T: int, s0=None) -> BpttResult:
    """Reverse-mode differentiation through s_{t+1} = F(theta, x, s_t) with
    loss L = C(s_T, y). Stores the forward states; per-step theta partials
    are returned newest-last (index t-1 holds step t)."""
    s = s0 if s0 is not None else model.init_state(model.batch_of(x))
    states = [list(s)]
    for _ in range(T):
        s = model.transition(params, x, s)
        states.append(list(s))
    y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
    g = [np.zeros_like(layer) for layer in states[-1]]
    g[-1] = cost.cost_grad(states[-1][-1], y2)
    state_step_grads = [None] * (T + 1)
    state_step_grads[T] = model.pack(g).ravel()
    theta_step_grads: List[Optional[ParamSet]] = [None] * T
    total = None
    for t in range(T, 0, -1):
        gs, gtheta = model.transition_vjp(params, x, states[t - 1], g)
        theta_step_grads[t - 1] = gtheta
        total = gtheta if total is None else total + gtheta
        g = gs
        state_step_grads[t - 1] = model.pack(g).ravel()
    return BpttResult(state_step_grads=state_step_grads,
                      theta_step_grads=theta_step_grads, total=total)


@dataclass
class GddReport:
    errors_state: List[float]
    errors_theta: List[float]
    beta: float
    K: int
    trailing_residual: float

    def max_error(self) -> float:
        return max(self.errors_state + self.errors_theta)


def gdd_check(model: PrimitiveModel, params: ParamSet, x, y, cost: CostFn,
              T: int, K: int, beta: float,
              converge_tol: float = 1e-10) -> GddReport:
    """Step-by-step comparison of nudged-phase increments against the
    per-step partial derivatives of BPTT.

    Precondition (asserted): the free trajectory is stationary over its K
    trailing steps — this doubles as a practical fixed-point criterion.
    """
    free = relax_nudged(model, params, x, y, cost, 0.0,
                        model.init_state(model.batch_of(x)),
                        RelaxConfig(max_iters=T, tol=0.0), record=True)
    traj = free.trajectory
    while len(traj) < T + 1:  # exact fixed point reached before step T
        traj.append(list(traj[-1]))
    trailing = max(
        max(float(np.max(np.abs(a - b))) for a, b in zip(traj[t + 1], traj[t]))
        for t in range(T - K, T))
    if trailing > converge_tol:
        raise PreconditionError(
            f"free phase not settled: trailing residual {trailing:.3e} "
            f"> {converge_tol:.1e} over the last {K} steps")
    s_star = free.state
    nudged = relax_nudged(model, params, x, y, cost, beta, s_star,
                          RelaxConfig(max_iters=K, tol=0.0), record=True)
    ntraj = nudged.trajectory  # K+1 states
    bptt = bptt_grads(model, params, x, y, cost, T)
    errors_state, errors_theta = [], []
    for t in range(K):
        d_state = (model.pack(ntraj[t + 1]) - model.pack(ntraj[t])).ravel() / beta
        ref_state = bptt.state_step_grads[T - t]
        errors_state.append(_rel(d_state + ref_state, ref_state))
        pg1 = model.phi_param_grad(params, x, ntraj[t + 1])
        pg0 = model.phi_param_grad(params, x, ntraj[t])
        d_theta = (pg1 - pg0).scale(1.0 / beta).ravel()
        ref_theta = bptt.theta_step_grads[T - t - 1].ravel()
        errors_theta.append(_rel(d_theta + ref_theta, ref_theta))
    return GddReport(errors_state=errors_state, errors_theta=errors_theta,
                     beta=beta, K=K, trailing_residual=trailing)


# ---------------------------------------------------------------------------
# linearized backprop through the fixed point (adjoint ODE)

@dataclass
class RbpResult:
    times: np.ndarray
    s_traj: np.ndarray            # [nt, D] adjoint state S_t
    theta_traj: dict              # name -> [nt, *shape] Theta_t
    theta_inf: ParamSet


def rbp_solve(model: EnergyModel, params: ParamSet, x, y, cost: CostFn,
              t_max: float = 20.0, dt: float = 0.05,
              relax_cfg: Optional[RelaxConfig] = None,
              method: str = "exact") -> RbpResult:
    """Integrate the adjoint system S' = -H S, Theta' = -(d2E/dtheta ds) S
    from S_0 = dC/ds(s*), Theta_0 = 0; Theta converges to dL/dtheta.

    method "exact" advances with the matrix exponential of the (constant)
    Hessian, which is the analytic solution of the linear ODE and accurate to
    rounding; "euler" is the plain explicit scheme at step dt.
    """
    relax_cfg = relax_cfg or RelaxConfig(max_iters=100000, tol=1e-13,
                                         epsilon=0.1)
    free = relax_free(model, params, x, relax_cfg)
    if not free.converged:
        raise RuntimeError(f"free relaxation did not converge "
                           f"(residual {free.residual:.3e})")
    s_star = free.state
    hess = model.state_hessian(params, x, s_star)
    dim = hess.shape[0]
    c0 = np.zeros(dim)
    out_grad = cost.cost_grad(s_star[-1], np.atleast_2d(y))
    c0[dim - out_grad.size:] = out_grad.ravel()
    nt = int(round(t_max / dt)) + 1
    times = np.arange(nt) * dt
    s_traj = np.empty((nt, dim))
    theta_traj = {name: np.empty((nt, *params[name].shape)) for name in params}
    s_vec = c0.copy()
    if method == "exact":
        prop = scipy.linalg.expm(-dt * hess)
        hinv = np.linalg.inv(hess)
        for n in range(nt):
            s_traj[n] = s_vec
            th = model.cross_apply(params, x, s_star, hinv @ (c0 - s_vec))
            for name in params:
                theta_traj[name][n] = -th[name]
            s_vec = prop @ s_vec
        theta_inf = model.cross_apply(params, x, s_star, hinv @ c0).scale(-1.0)
    elif method == "euler":
        acc = ParamSet({name: np.zeros_like(params[name]) for name in params})
        for n in range(nt):
            s_traj[n] = s_vec
            for name in params:
                theta_traj[name][n] = acc[name]
            acc = acc - model.cross_apply(params, x, s_star, s_vec).scale(dt)
            s_vec = s_vec - dt * (hess @ s_vec)
        theta_inf = acc
    else:
        raise ValueError(f"unknown method {method!r}")
    return RbpResult(times=times, s_traj=s_traj, theta_traj=theta_traj,
                     theta_inf=theta_inf)


# ---------------------------------------------------------------------------
# transient (projected-cost) equivalence

@dataclass
class TruncatedReport:
    theta_rel_error: float
    state_rel_error: float
    lhs_theta: ParamSet
    rhs_theta: ParamSet


def truncated_eqprop_check(model: EnergyModel, params: ParamSet, x, y,
                           cost: CostFn, t: float, beta: float,
                           dt: float = 1e-3) -> TruncatedReport:
    """Compare the time-t truncated estimator against the gradient of the
    projected cost (cost of the state evolved t units forward under the free
    flow), the latter reverse-differentiated on the same Euler grid."""
    relax_cfg = RelaxConfig(max_iters=200000, tol=1e-13, epsilon=0.1)
    free = relax_free(model, params, x, relax_cfg)
    if not free.converged:
        raise RuntimeError("free relaxation did not converge")
    s_star = free.state
    n = int(round(t / dt))
    # nudged Euler flow started at the fixed point
    s = [layer.copy() for layer in s_star]
    y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
    for _ in range(n):
        grad = model.state_grad(params, x, s)
        grad[-1] = grad[-1] + beta * cost.cost_grad(s[-1], y2)
        s = [layer - dt * g for layer, g in zip(s, grad)]
    pg_t = model.param_grad(params, x, s)
    pg_star = model.param_grad(params, x, s_star)
    lhs_theta = (pg_t - pg_star).scale(1.0 / beta)
    # one extra step for the time derivative of the state
    grad = model.state_grad(params, x, s)
    grad[-1] = grad[-1] + beta * cost.cost_grad(s[-1], y2)
    s_next = [layer - dt * g for layer, g in zip(s, grad)]
    lhs_state = (model.pack(s_next) - model.pack(s)).ravel() / (dt * beta)
    # projected-cost gradient: linear BPTT through n free Euler steps, all
    # Jacobians taken at the fixed point (the free flow from s* stays put)
    hess = model.state_hessian(params, x, s_star)
    dim = hess.shape[0]
    g_vec = np.zeros(dim)
    out_grad = cost.cost_grad(s_star[-1], y2)
    g_vec[dim - out_grad.size:] = out_grad.ravel()
    gtheta = ParamSet({name: np.zeros_like(params[name]) for name in params})
    step_mat = np.eye(dim) - dt * hess
    for _ in range(n):
        gtheta = gtheta - model.cross_apply(params, x, s_star, g_vec).scale(dt)
        g_vec = step_mat @ g_vec
    rhs_state = g_vec  # dL_t/ds at the fixed point
    return TruncatedReport(
        theta_rel_error=_rel(lhs_theta.ravel() - gtheta.ravel(), gtheta.ravel()),
        state_rel_error=_rel(lhs_state + rhs_state, rhs_state),
        lhs_theta=lhs_theta, rhs_theta=gtheta)


# ---------------------------------------------------------------------------
# estimator bias-order fitting

@dataclass
class OrderFit:
    betas: np.ndarray
    errors_one_sided: np.ndarray
    errors_symmetric: np.ndarray
    slope_one_sided: float
    slope_symmetric: float
    intercept_one_sided: float
    intercept_symmetric: float


def estimator_order_fit(model, params: ParamSet, x, y, cost: CostFn,
                        betas, relax_cfg: RelaxConfig,
                        nudge_cfg: Optional[RelaxConfig] = None,
                        ref_grad: Optional[ParamSet] = None,
                        fd_step: float = 1e-5) -> OrderFit:
    """Fit log-log slopes of |estimate(beta) - grad L| for the one-sided and
    symmetric estimators; the reference gradient defaults to the
    finite-difference oracle."""
    from .eqprop_core import grad_one_sided, grad_symmetric
    betas = np.asarray(sorted(betas, reverse=True), dtype=np.float64)
    if len(betas) < 3 or np.any(betas <= 0):
        raise ValueError("need at least 3 positive nudging strengths")
    nudge_cfg = nudge_cfg or relax_cfg
    if ref_grad is None:
        ref_grad = finite_diff_loss_grad(model, params, x, y, cost, relax_cfg,
                                         h=fd_step)
    free = relax_free(model, params, x, relax_cfg)
    err_one = np.empty(len(betas))
    err_sym = np.empty(len(betas))
    for i, beta in enumerate(betas):
        plus = relax_nudged(model, params, x, y, cost, beta, free.state,
                            nudge_cfg)
        minus = relax_nudged(model, params, x, y, cost, -beta, free.state,
                             nudge_cfg)
        one = grad_one_sided(model, params, x, free.state, plus.state, beta)
        sym = grad_symmetric(model, params, x, plus.state, minus.state, beta)
        err_one[i] = np.linalg.norm(one.grads.ravel() - ref_grad.ravel())
        err_sym[i] = np.linalg.norm(sym.grads.ravel() - ref_grad.ravel())
    lo1, io1 = np.polyfit(np.log(betas), np.log(np.maximum(err_one, 1e-300)), 1)
    lo2, io2 = np.polyfit(np.log(betas), np.log(np.maximum(err_sym, 1e-300)), 1)
    return OrderFit(betas=betas, errors_one_sided=err_one,
                    errors_symmetric=err_sym, slope_one_sided=float(lo1),
                    slope_symmetric=float(lo2), intercept_one_sided=float(io1),
                    intercept_symmetric=float(io2))


# ---------------------------------------------------------------------------
# stationarity-exchange identity (nested finite differences)

def stationarity_exchange_gap(a_mat, u, v, e, theta: float, beta: float,
                              h: float = 1e-4) -> float:
    """For F(theta, beta, s) = 0.5 s^T A s + theta u.s + beta v.s + e.s with
    s*(theta, beta) = argmin_s F, compare d/dtheta[dF/dbeta at s*] with
    d/dbeta[dF/dtheta at s*], both by nested central differences.
    Returns the absolute gap (zero in exact arithmetic at stationarity)."""
    a_mat = np.asarray(a_mat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)

    def s_star(th, be):
        return np.linalg.solve(a_mat, -(th * u + be * v + e))

    def df_dbeta(th, be):
        return float(v @ s_star(th, be))

    def df_dtheta(th, be):
        return float(u @ s_star(th, be))

    lhs = (df_dbeta(theta + h, beta) - df_dbeta(theta - h, beta)) / (2 * h)
    rhs = (df_dtheta(theta, beta + h) - df_dtheta(theta, beta - h)) / (2 * h)
    return abs(lhs - rhs)
