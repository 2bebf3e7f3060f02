"""Contrastive meta-learning on bilevel problems: the inner minimizer plays
the role of the equilibrium state, the outer loss plays the role of the cost,
and meta-gradients come from the usual two-phase difference of inner-loss
parameter-derivatives. Ships analytic quadratic instances plus the
implicit-function oracle used to verify them.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .params import ParamSet


class BilevelProblem(ABC):
    """Inner objective over adaptation variables phi (with meta-parameters
    theta held fixed) plus an outer objective evaluated at the adapted phi.
    Subclasses set `dim`, the size of phi."""

    dim: int

    @abstractmethod
    def inner_loss(self, theta: ParamSet, phi: np.ndarray) -> float: ...

    @abstractmethod
    def inner_grad_phi(self, theta: ParamSet, phi: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def inner_grad_theta(self, theta: ParamSet, phi: np.ndarray) -> ParamSet: ...

    @abstractmethod
    def outer_loss(self, phi: np.ndarray) -> float: ...

    @abstractmethod
    def outer_grad_phi(self, phi: np.ndarray) -> np.ndarray: ...


class QuadraticBilevel(BilevelProblem):
    """Inner: 0.5 phi^T (A + sum_k theta_k B_k) phi - c^T phi.
    Outer: 0.5 ||phi - y||^2. Everything is solvable in closed form, which
    makes this the reference instance for estimator-order checks.
    The ridge special case is d-dimensional A=I, B_1=I, c=data."""

    def __init__(self, a_mat, b_mats, c_vec, y_vec):
        self.a = np.asarray(a_mat, dtype=np.float64)
        self.b = [np.asarray(b, dtype=np.float64) for b in b_mats]
        self.c = np.asarray(c_vec, dtype=np.float64)
        self.y = np.asarray(y_vec, dtype=np.float64)
        d = self.a.shape[0]
        if self.a.shape != (d, d) or any(b.shape != (d, d) for b in self.b):
            raise ValueError("matrix shape mismatch")
        self.dim = d

    @staticmethod
    def ridge(data, y, d=None):
        """Inner 0.5||phi - data||^2 + 0.5*theta*||phi||^2 (as A=I, B=I,
        c=data), outer squared distance to y."""
        data = np.atleast_1d(np.asarray(data, dtype=np.float64))
        d = d or data.size
        return QuadraticBilevel(np.eye(d), [np.eye(d)], data,
                                np.atleast_1d(np.asarray(y, np.float64)))

    def init_theta(self, values) -> ParamSet:
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if values.size != len(self.b):
            raise ValueError(f"expected {len(self.b)} meta-parameters")
        return ParamSet({"theta": values})

    def hessian(self, theta: ParamSet) -> np.ndarray:
        h = self.a.copy()
        for tk, bk in zip(theta["theta"], self.b):
            h = h + tk * bk
        return h

    def inner_loss(self, theta, phi):
        h = self.hessian(theta)
        return float(0.5 * phi @ h @ phi - self.c @ phi)

    def inner_grad_phi(self, theta, phi):
        return self.hessian(theta) @ phi - self.c

    def inner_grad_theta(self, theta, phi):
        return ParamSet({"theta": np.array([0.5 * float(phi @ bk @ phi)
                                            for bk in self.b])})

    def outer_loss(self, phi):
        d = phi - self.y
        return 0.5 * float(d @ d)

    def outer_grad_phi(self, phi):
        return phi - self.y


def inner_solve(p: BilevelProblem, theta: ParamSet, beta: float = 0.0,
                lr: float = 0.1, max_iters: int = 100000,
                tol: float = 1e-12) -> np.ndarray:
    """Gradient descent from zero on inner + beta * outer, to gradient-norm
    tol. Quadratic problems get an exact linear solve, cross-checked against
    the same tolerance."""
    if isinstance(p, QuadraticBilevel):
        h = p.hessian(theta) + beta * np.eye(p.a.shape[0])
        phi = np.linalg.solve(h, p.c + beta * p.y)
        g = p.inner_grad_phi(theta, phi) + beta * p.outer_grad_phi(phi)
        if np.max(np.abs(g)) > 1e-8:
            raise RuntimeError("closed-form inner solve inconsistent")
        return phi
    phi = np.zeros(p.dim)
    for _ in range(max_iters):
        g = p.inner_grad_phi(theta, phi) + beta * p.outer_grad_phi(phi)
        if np.max(np.abs(g)) <= tol:
            return phi
        phi = phi - lr * g
        if not np.all(np.isfinite(phi)):
            raise RuntimeError("inner descent diverged")
    raise RuntimeError(f"inner solve did not converge "
                       f"(residual {np.max(np.abs(g)):.3e})")


@dataclass
class MetaGradEstimate:
    grads: ParamSet
    beta: float
    estimator_kind: str


def contrastive_meta_grad(p: BilevelProblem, theta: ParamSet, beta: float,
                          symmetric: bool = False,
                          **solve_kw) -> MetaGradEstimate:
    """Two-phase meta-gradient: difference of the inner loss's
    theta-derivative at the beta-perturbed and reference adapted solutions."""
    if beta == 0:
        raise ValueError("beta must be nonzero")
    g_plus = p.inner_grad_theta(theta, inner_solve(p, theta, beta, **solve_kw))
    if symmetric:
        g_minus = p.inner_grad_theta(theta,
                                     inner_solve(p, theta, -beta, **solve_kw))
        grads = (g_plus - g_minus).scale(0.5 / beta)
        kind = "symmetric"
    else:
        g_free = p.inner_grad_theta(theta, inner_solve(p, theta, 0.0,
                                                       **solve_kw))
        grads = (g_plus - g_free).scale(1.0 / beta)
        kind = "one_sided"
    return MetaGradEstimate(grads=grads, beta=beta, estimator_kind=kind)


def implicit_meta_grad(p: QuadraticBilevel, theta: ParamSet) -> ParamSet:
    """Implicit-function oracle: dL_out/dtheta_k =
    -(d phi*/dtheta_k)^T H^-1 ... spelled out, -(B_k phi*)^T H^-1 (phi* - y)
    for quadratic instances (the inner loss has no direct outer dependence)."""
    phi = inner_solve(p, theta, 0.0)
    h = p.hessian(theta)
    v = np.linalg.solve(h, p.outer_grad_phi(phi))
    return ParamSet({"theta": np.array([-float((bk @ phi) @ v)
                                        for bk in p.b])})
