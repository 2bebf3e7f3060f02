"""Two-phase equilibrium-propagation: relaxations, gradient estimators,
SGD training loop and the contrastive-Hebbian baseline.

Orientation convention: every estimator returns an estimate of +dL/dtheta,
so `sgd_step` always subtracts. For primitive (phi-side) models the raw
two-point difference estimates -dL/dtheta and the sign flip is handled here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from .energy_models import (CostFn, EnergyModel, LayeredHopfield,
                            PrimitiveModel, SoftmaxReadout)
from .numerics import DivergenceError
from .params import ParamSet


@dataclass(frozen=True)
class RelaxConfig:
    max_iters: int = 100          # T (free) or K (nudged) cap
    tol: float = 1e-8             # inf-norm early-stopping threshold
    epsilon: float = 0.5          # Euler step size (energy models only)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class RelaxResult:
    state: List[np.ndarray]
    iters: int
    residual: float
    converged: bool
    trajectory: Optional[List[List[np.ndarray]]] = None


@dataclass
class GradEstimate:
    grads: ParamSet
    beta: float
    estimator_kind: str  # "one_sided" | "symmetric"


@dataclass
class TrainConfig:
    T: int = 100
    K: int = 12
    epsilon: float = 0.5
    beta: float = 0.5
    epochs: int = 1
    batch_size: int = 20
    seed: int = 0
    estimator_kind: str = "one_sided"
    beta_sign_randomization: bool = False
    lr: float = 0.1                       # default learning rate
    lrs: dict = field(default_factory=dict)  # per-parameter-name overrides
    lr_out: float = 0.0                   # readout weight rate (softmax cost)
    tol: float = 1e-8
    cache_states: bool = False            # opt-in warm starts per sample

    def __post_init__(self):
        if self.T < 1 or self.K < 1:
            raise ValueError("T and K must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.beta == 0:
            raise ValueError("beta must be nonzero")
        if self.estimator_kind not in ("one_sided", "symmetric"):
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")


def _check_finite(state, it):
    for layer in state:
        if not np.all(np.isfinite(layer)):
            raise DivergenceError("relaxation diverged", it)


def _step(model, params, x, s, cost=None, y=None, beta=0.0, epsilon=0.5):
    """One update of the (possibly nudged) dynamics."""
    if isinstance(model, PrimitiveModel):
        s_new = model.transition(params, x, s)
        if beta != 0.0:
            s_new[-1] = s_new[-1] - beta * cost.cost_grad(s[-1], y)
        return s_new
    grad = model.state_grad(params, x, s)
    if beta != 0.0:
        grad[-1] = grad[-1] + beta * cost.cost_grad(s[-1], y)
    s_new = [layer - epsilon * g for layer, g in zip(s, grad)]
    if model.state_clip is not None:
        lo, hi = model.state_clip
        s_new = [np.clip(layer, lo, hi) for layer in s_new]
    return s_new


def _relax(model, params, x, s, cfg: RelaxConfig, cost=None, y=None,
           beta=0.0, record=False) -> RelaxResult:
    traj = [list(s)] if record else None
    residual = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        s_new = _step(model, params, x, s, cost, y, beta, cfg.epsilon)
        _check_finite(s_new, it)
        residual = max(float(np.max(np.abs(a - b))) if a.size else 0.0
                       for a, b in zip(s_new, s))
        s = s_new
        if record:
            traj.append(list(s))
        if residual <= cfg.tol:
            break
    return RelaxResult(state=s, iters=it, residual=residual,
                       converged=residual <= cfg.tol, trajectory=traj)


def relax_free(model, params: ParamSet, x, cfg: RelaxConfig,
               s0: Optional[List[np.ndarray]] = None) -> RelaxResult:
    """Free phase (beta = 0) from a zero state unless a cached one is given."""
    if s0 is None:
        s0 = model.init_state(model.batch_of(x))
    return _relax(model, params, x, [np.array(l, dtype=np.float64) for l in s0],
                  cfg)


def relax_nudged(model, params: ParamSet, x, y, cost: CostFn, beta: float,
                 s_start: List[np.ndarray], cfg: RelaxConfig,
                 record: bool = False) -> RelaxResult:
    """Nudged phase: the free update plus the force -beta * dC/ds, started
    from the free fixed point."""
    return _relax(model, params, x,
                  [np.array(l, dtype=np.float64) for l in s_start],
                  cfg, cost=cost, y=y, beta=beta, record=record)


def _two_point(model, params, x, s_a, s_b, scale) -> ParamSet:
    """scale * (param-side grads at s_a minus at s_b), oriented as +dL/dtheta."""
    if isinstance(model, PrimitiveModel):
        ga = model.phi_param_grad(params, x, s_a)
        gb = model.phi_param_grad(params, x, s_b)
        return (ga - gb).scale(-scale)  # phi-side estimator carries -dL/dtheta
    ga = model.param_grad(params, x, s_a)
    gb = model.param_grad(params, x, s_b)
    return (ga - gb).scale(scale)


def grad_one_sided(model, params, x, s_free, s_nudged, beta: float) -> GradEstimate:
    if beta == 0:
        raise ValueError("beta must be nonzero")
    grads = _two_point(model, params, x, s_nudged, s_free, 1.0 / beta)
    return GradEstimate(grads=grads, beta=beta, estimator_kind="one_sided")


def grad_symmetric(model, params, x, s_plus, s_minus, beta: float) -> GradEstimate:
    if beta == 0:
        raise ValueError("beta must be nonzero")
    grads = _two_point(model, params, x, s_plus, s_minus, 0.5 / beta)
    return GradEstimate(grads=grads, beta=beta, estimator_kind="symmetric")


def sgd_step(params: ParamSet, grad: GradEstimate | ParamSet, lr: float = 0.1,
             lrs: dict | None = None) -> ParamSet:
    """theta_k <- theta_k - alpha_k * grad_k (per-name rates override lr)."""
    g = grad.grads if isinstance(grad, GradEstimate) else grad
    params.check_aligned(g)
    lrs = lrs or {}
    out = ParamSet()
    for name in params:
        out[name] = params[name] - lrs.get(name, lr) * g[name]
    out.lrs = dict(params.lrs)
    return out


def estimate_batch_grad(model, params, x, y, cost, cfg: TrainConfig,
                        rng: Optional[np.random.Generator] = None,
                        s0=None):
    """Free + nudged phases on one minibatch; returns (free result, grads)."""
    free_cfg = RelaxConfig(max_iters=cfg.T, tol=cfg.tol, epsilon=cfg.epsilon)
    nudge_cfg = RelaxConfig(max_iters=cfg.K, tol=0.0, epsilon=cfg.epsilon)
    free = relax_free(model, params, x, free_cfg, s0=s0)
    beta = cfg.beta
    if cfg.beta_sign_randomization and rng is not None:
        beta = beta if rng.integers(2) == 0 else -beta
    if cfg.estimator_kind == "symmetric":
        plus = relax_nudged(model, params, x, y, cost, beta, free.state, nudge_cfg)
        minus = relax_nudged(model, params, x, y, cost, -beta, free.state,
                             nudge_cfg)
        est = grad_symmetric(model, params, x, plus.state, minus.state, beta)
    else:
        nudged = relax_nudged(model, params, x, y, cost, beta, free.state,
                              nudge_cfg)
        est = grad_one_sided(model, params, x, free.state, nudged.state, beta)
    return free, est


def evaluate(model, params, cost, xs, ys_onehot, cfg: TrainConfig,
             batch: int = 256):
    """(error %, mean loss) of free-phase predictions over a dataset."""
    free_cfg = RelaxConfig(max_iters=cfg.T, tol=cfg.tol, epsilon=cfg.epsilon)
    wrong = 0
    loss_sum = 0.0
    n = xs.shape[0]
    for lo in range(0, n, batch):
        xb = xs[lo:lo + batch]
        yb = ys_onehot[lo:lo + batch]
        free = relax_free(model, params, xb, free_cfg)
        out = free.state[-1]
        preds = cost.predict(out)
        wrong += int(np.sum(preds != np.argmax(yb, axis=1)))
        loss_sum += float(np.sum(cost.cost(out, yb)))
    return 100.0 * wrong / n, loss_sum / n


def train(model, cost: CostFn, params: ParamSet, train_x, train_y_onehot,
          test_x, test_y_onehot, cfg: TrainConfig,
          rng: np.random.Generator) -> Iterator[dict]:
    """SGD training; yields one metrics dict per epoch.

    Train error/loss are accumulated on the fly from the free phases of the
    training pass (the states are computed anyway); test metrics come from a
    dedicated free-phase pass.
    """
    n = train_x.shape[0]
    cached = None
    if cfg.cache_states:
        cached = [np.zeros((n, *shape)) for shape in model.layer_shapes()]
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        wrong = 0
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            xb, yb = train_x[sel], train_y_onehot[sel]
            s0 = [layer[sel] for layer in cached] if cached is not None else None
            free, est = estimate_batch_grad(model, params, xb, yb, cost, cfg,
                                            rng, s0=s0)
            if cached is not None:
                for store, layer in zip(cached, free.state):
                    store[sel] = layer
            out = free.state[-1]
            preds = cost.predict(out)
            wrong += int(np.sum(preds != np.argmax(yb, axis=1)))
            loss_sum += float(np.sum(cost.cost(out, yb)))
            params = sgd_step(params, est, cfg.lr, cfg.lrs)
            if isinstance(cost, SoftmaxReadout) and cfg.lr_out > 0:
                cost.w_out = cost.w_out - cfg.lr_out * cost.wout_grad(out, yb)
        train_error = 100.0 * wrong / n
        mean_loss = loss_sum / n
        test_error, _ = evaluate(model, params, cost, test_x, test_y_onehot, cfg)
        yield {
            "epoch": epoch,
            "train_error": train_error,
            "test_error": test_error,
            "mean_loss": mean_loss,
            "wall_s": time.perf_counter() - t0,
            "params": params,
        }


def chl_step(model: LayeredHopfield, params: ParamSet, x, y,
             cfg: RelaxConfig, eta: float = 0.1):
    """Contrastive Hebbian learning: anti-Hebbian free phase, Hebbian phase
    with the outputs hard-clamped to y. Returns (weight update ParamSet,
    contrastive loss E(clamped) - E(free))."""
    free = relax_free(model, params, x, cfg)
    # clamped phase: output layer pinned at y, hidden layers relax
    s = [layer.copy() for layer in free.state]
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    s[-1] = y.copy()
    for it in range(1, cfg.max_iters + 1):
        grad = model.state_grad(params, x, s)
        s_new = [layer - cfg.epsilon * g for layer, g in zip(s, grad)]
        if model.state_clip is not None:
            lo, hi = model.state_clip
            s_new = [np.clip(layer, lo, hi) for layer in s_new]
        s_new[-1] = y.copy()
        _check_finite(s_new, it)
        residual = max(float(np.max(np.abs(a - b)))
                       for a, b in zip(s_new[:-1], s[:-1])) if len(s) > 1 else 0.0
        s = s_new
        if residual <= cfg.tol:
            break
    pg_free = model.param_grad(params, x, free.state)
    pg_clamped = model.param_grad(params, x, s)
    # param_grad is -sigma sigma^T, so free-minus-clamped is the Hebbian
    # difference sigma sigma^+(clamped) - sigma sigma^-(free)
    delta = (pg_free - pg_clamped).scale(eta)
    l_chl = float(np.mean(model.energy(params, x, s)
                          - model.energy(params, x, free.state)))
    return delta, l_chl
