"""Dense-tensor utilities and the generic solvers used across the library.

Everything is float64 numpy. Gradient-equivalence checks downstream need >=10
significant digits, which float32 cannot provide, so inputs are upcast and
validated at the API boundary (`as_tensor` rejects NaN/Inf).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    """A solver produced a non-finite state; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class SingularJacobianError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    tol: float = 1e-8
    damping: float = 1.0  # Newton step scale, in (0, 1]

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must be in (0, 1]")


def as_tensor(x, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate + upcast to a finite float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite entries rejected at tensor boundary")
    if shape is not None and tuple(a.shape) != tuple(shape):
        raise ValueError(f"expected shape {tuple(shape)}, got {a.shape}")
    return a


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; (seed, stream) -> independent stream.

    The substream id is packed into the high 64 bits of the 128-bit key so
    parallel workers can draw independent, reproducible numbers.
    """
    if not (0 <= seed < 2**64):
        raise ValueError("seed must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(int(stream) << 64) | int(seed)))


# ---------------------------------------------------------------------------
# activations

def hard_sigmoid(s: np.ndarray) -> np.ndarray:
    return np.clip(s, 0.0, 1.0)


def hard_sigmoid_deriv(s: np.ndarray) -> np.ndarray:
    """Subgradient of clip(s,0,1): 1 inside (0,1), 0 outside, 1/2 at the
    boundary (ties broken toward the interior so boundary units can re-enter).
    """
    s = np.asarray(s)
    d = np.where((s > 0.0) & (s < 1.0), 1.0, 0.0)
    return np.where((s == 0.0) | (s == 1.0), 0.5, d)


# ---------------------------------------------------------------------------
# linear algebra helpers

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv2d(kernel: np.ndarray, x: np.ndarray, padding: int = 0) -> np.ndarray:
    """Cross-correlation, stride 1, zero padding.

    kernel: [C_out, C_in, kh, kw]; x: [C_in, H, W] or [B, C_in, H, W].
    Output spatial size: H + 2*padding - kh + 1.
    """
    kernel = as_tensor(kernel)
    x = as_tensor(x)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    co, ci, kh, kw = kernel.shape
    b, ci2, h, w = x.shape
    if ci != ci2:
        raise ValueError(f"channel mismatch: kernel {ci}, input {ci2}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: [B, C_in, H', W', kh, kw]
    out = np.einsum("oikl,bihwkl->bohw", kernel, win, optimize=True)
    return out if batched else out[0]


def conv2d_input_grad(kernel: np.ndarray, gout: np.ndarray, padding: int,
                      input_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of conv2d w.r.t. its input (transposed convolution)."""
    kernel = as_tensor(kernel)
    gout = np.asarray(gout, dtype=np.float64)
    batched = gout.ndim == 4
    if not batched:
        gout = gout[None]
    co, ci, kh, kw = kernel.shape
    b = gout.shape[0]
    h, w = input_hw
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = gout.shape[2], gout.shape[3]
    gpad = np.zeros((b, ci, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + oh, j:j + ow] += np.einsum(
                "oc,bohw->bchw", kernel[:, :, i, j], gout, optimize=True)
    if padding:
        gpad = gpad[:, :, padding:hp - padding, padding:wp - padding]
    return gpad if batched else gpad[0]


def conv2d_kernel_grad(gout: np.ndarray, x: np.ndarray, padding: int,
                       kernel_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of conv2d w.r.t. the kernel."""
    x = as_tensor(x)
    gout = np.asarray(gout, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
        gout = gout[None]
    kh, kw = kernel_hw
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("bohw,bihwkl->oikl", gout, win, optimize=True)


def pool(x: np.ndarray, window: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool with recorded argmax.

    x: [..., H, W] with H, W divisible by `window`. Returns (pooled, idx)
    where idx holds the flat within-window argmax in [0, window**2).
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    if h % window or w % window:
        raise ValueError(f"spatial extents {(h, w)} not divisible by {window}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // window, window, w // window, window)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // window, w // window,
                                                 window * window)
    idx = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def inverse_pool(values: np.ndarray, idx: np.ndarray, window: int = 2) -> np.ndarray:
    """Scatter each pooled value back to its recorded argmax, zeros elsewhere."""
    values = np.asarray(values, dtype=np.float64)
    lead = values.shape[:-2]
    hh, ww = values.shape[-2], values.shape[-1]
    blocks = np.zeros((*lead, hh, ww, window * window))
    np.put_along_axis(blocks, idx[..., None], values[..., None], axis=-1)
    blocks = blocks.reshape(*lead, hh, ww, window, window)
    blocks = np.moveaxis(blocks, -2, -3)
    return blocks.reshape(*lead, hh * window, ww * window)


def pool_gather(x: np.ndarray, idx: np.ndarray, window: int = 2) -> np.ndarray:
    """Select from each window of x the entry at the *stored* argmax position
    (the adjoint of inverse_pool as a linear map of its value argument)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // window, window, w // window, window)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // window, w // window,
                                                 window * window)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# solvers

def fixed_point_iterate(step: Callable[[np.ndarray], np.ndarray],
                        s0: np.ndarray,
                        cfg: SolverConfig) -> tuple[np.ndarray, int, float]:
    """Iterate s <- step(s) until the inf-norm of the update drops below tol.

    Returns (state, iterations used, final residual).
    """
    s = np.asarray(s0, dtype=np.float64)
    residual = np.inf
    for it in range(1, cfg.max_iters + 1):
        s_next = np.asarray(step(s), dtype=np.float64)
        if not np.all(np.isfinite(s_next)):
            raise DivergenceError("fixed-point iteration diverged", it)
        residual = float(np.max(np.abs(s_next - s))) if s_next.size else 0.0
        s = s_next
        if residual <= cfg.tol:
            return s, it, residual
    return s, cfg.max_iters, residual


def newton_damped(residual: Callable[[np.ndarray], np.ndarray],
                  jacobian: Callable[[np.ndarray], np.ndarray],
                  v0: np.ndarray,
                  cfg: SolverConfig) -> tuple:
    """Damped Newton on r(v)=0: v <- v - damping * J^-1 r.

    Returns (solution, iterations used, final residual inf-norm). A simple
    backtracking halving guards against overshoot on stiff (e.g.
    exponential-diode) residuals; well-behaved problems take the full
    damped step.
    """
    v = np.atleast_1d(np.asarray(v0, dtype=np.float64)).copy()
    scalar = np.asarray(v0).ndim == 0
    r = np.atleast_1d(np.asarray(residual(v if not scalar else v[0])))
    for it in range(1, cfg.max_iters + 1):
        rnorm = float(np.max(np.abs(r))) if r.size else 0.0
        if rnorm <= cfg.tol:
            return (v[0] if scalar else v), it - 1, rnorm
        jac = np.atleast_2d(np.asarray(jacobian(v if not scalar else v[0]),
                                       dtype=np.float64))
        try:
            delta = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}") from exc
        if not np.all(np.isfinite(delta)):
            raise SingularJacobianError(f"non-finite Newton step at iteration {it}")
        scale = cfg.damping
        for _ in range(30):
            v_new = v - scale * delta
            r_new = np.atleast_1d(np.asarray(
                residual(v_new if not scalar else v_new[0])))
            if np.all(np.isfinite(r_new)) and (
                    float(np.max(np.abs(r_new))) < rnorm or rnorm == 0.0):
                break
            scale *= 0.5
        else:
            raise NonConvergenceError("Newton backtracking stalled", rnorm)
        v, r = v_new, r_new
    rnorm = float(np.max(np.abs(r))) if r.size else 0.0
    if rnorm <= cfg.tol:
        return (v[0] if scalar else v), cfg.max_iters, rnorm
    raise NonConvergenceError("Newton did not converge", rnorm)


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], v: np.ndarray,
                h: float = 1e-7) -> np.ndarray:
    """Forward-difference Jacobian of a vector map (utility for Newton)."""
    v = np.asarray(v, dtype=np.float64)
    f0 = np.asarray(f(v))
    jac = np.empty((f0.size, v.size))
    for k in range(v.size):
        vp = v.copy()
        step = h * max(1.0, abs(vp[k]))
        vp[k] += step
        jac[:, k] = (np.asarray(f(vp)) - f0) / step
    return jac
