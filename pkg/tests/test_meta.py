import numpy as np
import pytest

from eqprop_lab.meta import (BilevelProblem, QuadraticBilevel,
                             contrastive_meta_grad, implicit_meta_grad,
                             inner_solve)
from eqprop_lab.numerics import make_rng
from eqprop_lab.params import ParamSet


def random_quadratic(rng, d=3, n_theta=2):
    q = rng.standard_normal((d, d))
    a = q @ q.T + d * np.eye(d)
    bs = []
    for _ in range(n_theta):
        r = rng.standard_normal((d, d)) * 0.2
        bs.append(r @ r.T)
    return QuadraticBilevel(a, bs, rng.standard_normal(d),
                            rng.standard_normal(d))


class TestRidge:
    def test_closed_form_meta_gradient(self):
        # inner 0.5||phi-2||^2 + 0.5 theta ||phi||^2, outer 0.5 phi^2 at y=0:
        # phi* = 2/(1+theta); dL/dtheta at theta=1 is -0.5
        p = QuadraticBilevel.ridge([2.0], [0.0])
        th = p.init_theta([1.0])
        sym = contrastive_meta_grad(p, th, 1e-3, symmetric=True)
        assert sym.grads["theta"][0] == pytest.approx(-0.5, abs=1e-4)
        imp = implicit_meta_grad(p, th)
        assert imp["theta"][0] == pytest.approx(-0.5, abs=1e-12)

    def test_inner_solve_value(self):
        p = QuadraticBilevel.ridge([2.0], [0.0])
        phi = inner_solve(p, p.init_theta([1.0]), 0.0)
        np.testing.assert_allclose(phi, [1.0], atol=1e-12)


class TestQuadraticInstances:
    def test_implicit_matches_contrastive(self):
        rng = make_rng(50)
        for _ in range(5):
            p = random_quadratic(rng)
            th = p.init_theta(rng.uniform(0.1, 0.5, 2))
            imp = implicit_meta_grad(p, th)
            sym = contrastive_meta_grad(p, th, 1e-4, symmetric=True)
            np.testing.assert_allclose(sym.grads["theta"], imp["theta"],
                                       atol=1e-6)

    def test_estimator_orders(self):
        rng = make_rng(51)
        p = random_quadratic(rng)
        th = p.init_theta([0.3, 0.2])
        ref = implicit_meta_grad(p, th)["theta"]
        betas = np.array([0.2, 0.1, 0.05, 0.02, 0.01])
        e1, e2 = [], []
        for b in betas:
            one = contrastive_meta_grad(p, th, b)
            sym = contrastive_meta_grad(p, th, b, symmetric=True)
            e1.append(np.linalg.norm(one.grads["theta"] - ref))
            e2.append(np.linalg.norm(sym.grads["theta"] - ref))
        s1 = np.polyfit(np.log(betas), np.log(e1), 1)[0]
        s2 = np.polyfit(np.log(betas), np.log(e2), 1)[0]
        assert s1 == pytest.approx(1.0, abs=0.15)
        assert s2 == pytest.approx(2.0, abs=0.3)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            QuadraticBilevel(np.eye(2), [np.eye(3)], np.zeros(2), np.zeros(2))
        p = QuadraticBilevel.ridge([1.0, 2.0], [0.0, 0.0])
        with pytest.raises(ValueError):
            p.init_theta([1.0, 2.0])  # ridge has exactly one meta-parameter

    def test_zero_beta_rejected(self):
        p = QuadraticBilevel.ridge([2.0], [0.0])
        with pytest.raises(ValueError):
            contrastive_meta_grad(p, p.init_theta([1.0]), 0.0)


class QuarticInner(BilevelProblem):
    """Non-quadratic instance exercising the generic descent path:
    inner 0.25 phi^4 + 0.5 theta phi^2 - phi, outer 0.5 (phi - 1)^2."""

    dim = 1

    def inner_loss(self, theta, phi):
        t = theta["theta"][0]
        return float(0.25 * phi[0] ** 4 + 0.5 * t * phi[0] ** 2 - phi[0])

    def inner_grad_phi(self, theta, phi):
        t = theta["theta"][0]
        return np.array([phi[0] ** 3 + t * phi[0] - 1.0])

    def inner_grad_theta(self, theta, phi):
        return ParamSet({"theta": np.array([0.5 * phi[0] ** 2])})

    def outer_loss(self, phi):
        return 0.5 * float((phi[0] - 1.0) ** 2)

    def outer_grad_phi(self, phi):
        return np.array([phi[0] - 1.0])


class TestGenericDescentPath:
    def test_matches_finite_difference(self):
        p = QuarticInner()
        th = ParamSet({"theta": np.array([0.5])})
        sym = contrastive_meta_grad(p, th, 1e-3, symmetric=True)
        h = 1e-5

        def outer_at(t):
            phi = inner_solve(p, ParamSet({"theta": np.array([t])}), 0.0)
            return p.outer_loss(phi)

        fd = (outer_at(0.5 + h) - outer_at(0.5 - h)) / (2 * h)
        assert sym.grads["theta"][0] == pytest.approx(fd, rel=1e-3)

    def test_divergent_inner_raises(self):
        p = QuarticInner()
        th = ParamSet({"theta": np.array([0.5])})
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(RuntimeError):
                inner_solve(p, th, 0.0, lr=10.0, max_iters=50)
