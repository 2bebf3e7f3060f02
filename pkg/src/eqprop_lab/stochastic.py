"""Sampling-based two-phase learning: overdamped Langevin chains targeting
the Gibbs density exp(-E - beta*C)/Z, expectation-difference gradient
estimates with Monte-Carlo standard errors, and exact quadrature oracles for
one- and two-dimensional systems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .energy_models import EnergyModel
from .numerics import DivergenceError, make_rng
from .params import ParamSet


@dataclass
class SampleBatch:
    samples: np.ndarray      # [n, dim]
    burn_in: int
    thin: int
    seed: int

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError("samples must be a non-empty [n, dim] array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")


@dataclass
class SamplerConfig:
    dt: float = 1e-3
    burn_in: int = 10000
    thin: int = 10
    n_chains: int = 1
    noise_scale: float = 1.0   # 0 recovers deterministic gradient descent

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.burn_in < 0 or self.thin < 1 or self.n_chains < 1:
            raise ValueError("bad sampler configuration")


def _drift(model: EnergyModel, params, x, s_flat, beta, cost, y):
    """-dE/ds - beta*dC/ds for a batch of flattened states."""
    layers = model.unpack(s_flat)
    grad = model.state_grad(params, x, layers)
    if beta != 0.0:
        yb = np.atleast_2d(y)
        if yb.shape[0] == 1 and layers[-1].shape[0] > 1:
            yb = np.repeat(yb, layers[-1].shape[0], axis=0)
        grad[-1] = grad[-1] + beta * cost.cost_grad(layers[-1], yb)
    return model.pack(grad)


def langevin_sample(model: EnergyModel, params: ParamSet, x, beta: float,
                    cost, y, n: int, cfg: SamplerConfig,
                    seed: int = 0) -> SampleBatch:
    """Euler-Maruyama chains: s <- s - (dE/ds + beta dC/ds) dt + sqrt(2 dt) xi.

    Chains run vectorized as a batch, each on its own counter-based random
    substream, so the result is reproducible and independent of chain count
    scheduling. Returns n draws pooled round-robin across chains after
    burn-in and thinning.
    """
    per_chain = -(-n // cfg.n_chains)          # ceil division
    rngs = [make_rng(seed, stream=c + 1) for c in range(cfg.n_chains)]
    dim = sum(int(np.prod(sh)) for sh in model.layer_shapes())
    s = np.zeros((cfg.n_chains, dim))
    if x is None:
        x = np.zeros((cfg.n_chains, 0))
    else:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 1:
            x = np.repeat(x, cfg.n_chains, axis=0)
    sigma = cfg.noise_scale * np.sqrt(2.0 * cfg.dt)
    # per-chain noise is drawn in blocks: each chain consumes its own
    # substream in order, so results are independent of the block size
    block = 512
    noise_buf = np.empty((0, cfg.n_chains, dim))
    buf_pos = 0

    def next_noise():
        nonlocal noise_buf, buf_pos
        if buf_pos >= noise_buf.shape[0]:
            noise_buf = np.stack([r.standard_normal((block, dim))
                                  for r in rngs], axis=1)
            buf_pos = 0
        buf_pos += 1
        return noise_buf[buf_pos - 1]

    def step(s):
        drift = _drift(model, params, x, s, beta, cost, y)
        return s - drift * cfg.dt + sigma * next_noise()

    for it in range(cfg.burn_in):
        s = step(s)
        if not np.all(np.isfinite(s)):
            raise DivergenceError("Langevin chain diverged during burn-in", it)
    out = np.empty((per_chain, cfg.n_chains, dim))
    for k in range(per_chain):
        for _ in range(cfg.thin):
            s = step(s)
        if not np.all(np.isfinite(s)):
            raise DivergenceError("Langevin chain diverged", k)
        out[k] = s
    samples = out.reshape(per_chain * cfg.n_chains, dim)[:n]
    return SampleBatch(samples=samples, burn_in=cfg.burn_in, thin=cfg.thin,
                       seed=seed)


class QuadratureError(RuntimeError):
    """The integration grid is too coarse for the requested accuracy."""


def exact_small_oracle(model: EnergyModel, params: ParamSet, x, beta: float,
                       cost, y, grid: np.ndarray,
                       refine_tol: float = 1e-6):
    """Trapezoid quadrature of exp(-E - beta C) on a 1-D or 2-D grid.

    Returns (Z, expectations) where expectations is a ParamSet holding
    E_p[dE/dtheta]. The grid is internally refined once (doubled density);
    if Z moves by more than refine_tol relatively, the grid is too coarse.
    """
    grid = np.asarray(grid, dtype=np.float64)
    dim = sum(int(np.prod(sh)) for sh in model.layer_shapes())
    if dim > 2:
        raise ValueError("exact oracle supports dim <= 2 only")

    def compute(g):
        if dim == 1:
            pts = g[:, None]
            axes = (g,)
        else:
            aa, bb = np.meshgrid(g, g, indexing="ij")
            pts = np.stack([aa.ravel(), bb.ravel()], axis=1)
            axes = (g, g)
        xb = None if x is None else np.repeat(np.atleast_2d(x), pts.shape[0],
                                              axis=0)
        layers = model.unpack(pts)
        logw = -model.energy(params, xb, layers)
        if beta != 0.0:
            yb = np.repeat(np.atleast_2d(y), pts.shape[0], axis=0)
            logw = logw - beta * np.asarray(cost.cost(layers[-1], yb))
        w = np.exp(logw)
        if dim == 1:
            z = np.trapezoid(w, axes[0])
        else:
            z = np.trapezoid(np.trapezoid(w.reshape(len(g), len(g)), g,
                                          axis=1), g)
        exps = ParamSet()
        for name in params:
            acc = np.zeros_like(params[name])
            it = np.nditer(acc, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                vals = np.array([
                    model.param_grad(params, None if xb is None else xb[k:k+1],
                                     model.unpack(pts[k:k+1]))[name][idx]
                    for k in range(pts.shape[0])])
                f = w * vals
                if dim == 1:
                    acc[idx] = np.trapezoid(f, axes[0]) / z
                else:
                    acc[idx] = np.trapezoid(
                        np.trapezoid(f.reshape(len(g), len(g)), g, axis=1),
                        g) / z
            exps[name] = acc
        return float(z), exps

    z, exps = compute(grid)
    fine = np.linspace(grid[0], grid[-1], 2 * len(grid) - 1)
    z_fine, exps_fine = compute(fine)
    if abs(z_fine - z) / max(abs(z_fine), 1e-300) > refine_tol:
        raise QuadratureError(
            f"grid too coarse: Z changed by "
            f"{abs(z_fine - z) / abs(z_fine):.2e} under refinement")
    return z_fine, exps_fine


def sample_param_grad_moments(model: EnergyModel, params: ParamSet, x,
                              batch: SampleBatch):
    """Mean and standard error of dE/dtheta over a sample batch."""
    n = batch.samples.shape[0]
    per = {name: np.empty((n, *params[name].shape)) for name in params}
    xb = None if x is None else np.atleast_2d(x)
    for k in range(n):
        g = model.param_grad(params, xb, model.unpack(batch.samples[k:k+1]))
        for name in params:
            per[name][k] = g[name]
    mean = ParamSet({name: np.mean(per[name], axis=0) for name in params})
    se = ParamSet({name: np.std(per[name], axis=0, ddof=1) / np.sqrt(n)
                   for name in params})
    return mean, se


@dataclass
class StochasticGradEstimate:
    grads: ParamSet
    std_errors: ParamSet
    beta: float
    estimator_kind: str


def stochastic_grad_estimate(model: EnergyModel, params: ParamSet, x, y,
                             cost, beta: float, sampler,
                             symmetric: bool = False) -> StochasticGradEstimate:
    """(1/beta)(E_nudged[dE/dtheta] - E_free[dE/dtheta]), or the +/-beta pair
    over 2 beta. `sampler(beta)` must return either a SampleBatch (Monte
    Carlo, standard errors propagated) or a (Z, expectations) oracle pair
    (standard errors zero)."""
    if beta == 0:
        raise ValueError("beta must be nonzero")

    def moments(b):
        res = sampler(b)
        if isinstance(res, SampleBatch):
            return sample_param_grad_moments(model, params, x, res)
        _, exps = res
        return exps, exps.map(np.zeros_like)

    b_hi, b_lo = (beta, -beta) if symmetric else (beta, 0.0)
    scale = 0.5 / beta if symmetric else 1.0 / beta
    m_hi, se_hi = moments(b_hi)
    m_lo, se_lo = moments(b_lo)
    grads = (m_hi - m_lo).scale(scale)
    ses = se_hi.combine(se_lo, lambda a, b: np.hypot(a, b) * abs(scale))
    return StochasticGradEstimate(
        grads=grads, std_errors=ses, beta=beta,
        estimator_kind="symmetric" if symmetric else "one_sided")
