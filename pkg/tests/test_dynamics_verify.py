import numpy as np
import pytest

from conftest import make_interior_fc_primitive, make_interior_hopfield
from eqprop_lab.dynamics_verify import (PreconditionError, bptt_grads,
                                        estimator_order_fit,
                                        finite_diff_loss_grad, gdd_check,
                                        rbp_solve,
                                        stationarity_exchange_gap,
                                        truncated_eqprop_check)
from eqprop_lab.energy_models import ScalarQuadratic, SquaredError
from eqprop_lab.eqprop_core import (RelaxConfig, grad_symmetric, relax_free,
                                    relax_nudged)
from eqprop_lab.numerics import make_rng

COST = SquaredError()
QUAD_RELAX = RelaxConfig(max_iters=20000, tol=1e-14, epsilon=0.3)


class TestFiniteDiff:
    def test_quadratic_closed_form(self):
        m = ScalarQuadratic()
        p = m.init_params(2.0)
        fd = finite_diff_loss_grad(m, p, np.zeros((1, 1)), np.array([[0.5]]),
                                   COST, QUAD_RELAX)
        np.testing.assert_allclose(fd["theta"], [1.5], atol=1e-8)


class TestBptt:
    def test_total_matches_finite_difference(self):
        rng = make_rng(20)
        net, p, x, y = make_interior_fc_primitive(rng)
        T = 80
        res = bptt_grads(net, p, x, y, COST, T)
        fd = finite_diff_loss_grad(net, p, x, y, COST,
                                   RelaxConfig(max_iters=T, tol=0.0), h=1e-6)
        np.testing.assert_allclose(res.total.ravel(), fd.ravel(), atol=1e-7)

    def test_step_grads_shapes(self):
        rng = make_rng(21)
        net, p, x, y = make_interior_fc_primitive(rng)
        res = bptt_grads(net, p, x, y, COST, 10)
        assert len(res.state_step_grads) == 11
        assert len(res.theta_step_grads) == 10


class TestGdd:
    def test_small_errors_on_settled_net(self):
        rng = make_rng(22)
        net, p, x, y = make_interior_fc_primitive(rng)
        rep = gdd_check(net, p, x, y, COST, T=80, K=10, beta=1e-6)
        assert rep.max_error() < 1e-2
        assert len(rep.errors_state) == 10 and len(rep.errors_theta) == 10

    def test_precondition_raises_when_not_settled(self):
        rng = make_rng(23)
        net, p, x, y = make_interior_fc_primitive(rng)
        with pytest.raises(PreconditionError):
            gdd_check(net, p, x, y, COST, T=3, K=2, beta=1e-6)


class TestRbp:
    def test_scalar_quadratic_closed_form(self):
        m = ScalarQuadratic()
        p = m.init_params(1.7)
        res = rbp_solve(m, p, np.zeros((1, 1)), np.array([[0.4]]), COST,
                        t_max=5.0, dt=0.05)
        closed = (1 - np.exp(-res.times)) * (1.7 - 0.4)
        np.testing.assert_allclose(res.theta_traj["theta"][:, 0], closed,
                                   atol=1e-9)
        np.testing.assert_allclose(res.theta_inf["theta"], [1.3], atol=1e-10)

    def test_euler_approaches_exact(self):
        m = ScalarQuadratic()
        p = m.init_params(1.7)
        kw = dict(t_max=20.0, cost=COST, x=np.zeros((1, 1)),
                  y=np.array([[0.4]]))
        exact = rbp_solve(m, p, method="exact", dt=0.05, **kw)
        euler = rbp_solve(m, p, method="euler", dt=0.005, **kw)
        np.testing.assert_allclose(euler.theta_inf["theta"],
                                   exact.theta_inf["theta"], atol=1e-2)

    def test_hopfield_matches_finite_difference(self):
        rng = make_rng(24)
        m, p, x, y, relax, _ = make_interior_hopfield(rng)
        fd = finite_diff_loss_grad(m, p, x, y, COST, relax, h=1e-5)
        rb = rbp_solve(m, p, x, y, COST, t_max=60.0, dt=0.05, relax_cfg=relax)
        rel = (np.linalg.norm(rb.theta_inf.ravel() - fd.ravel())
               / np.linalg.norm(fd.ravel()))
        assert rel < 1e-6

    def test_unknown_method(self):
        m = ScalarQuadratic()
        with pytest.raises(ValueError):
            rbp_solve(m, m.init_params(1.0), np.zeros((1, 1)),
                      np.array([[0.0]]), COST, method="rk4")


class TestTruncated:
    def test_finite_time_equivalence(self):
        rng = make_rng(25)
        m, p, x, y, relax, _ = make_interior_hopfield(rng)
        rep = truncated_eqprop_check(m, p, x, y, COST, t=2.0, beta=1e-6,
                                     dt=1e-3)
        assert rep.theta_rel_error < 1e-3
        assert rep.state_rel_error < 1e-3


class TestOrderFit:
    def test_quadratic_slopes(self):
        m = ScalarQuadratic()
        p = m.init_params(1.0)
        fit = estimator_order_fit(m, p, np.zeros((1, 1)), np.array([[0.0]]),
                                  COST, [0.2, 0.1, 0.05, 0.02, 0.01],
                                  QUAD_RELAX, fd_step=1e-6)
        assert fit.slope_one_sided == pytest.approx(1.0, abs=0.15)
        assert fit.slope_symmetric == pytest.approx(2.0, abs=0.3)

    def test_needs_three_betas(self):
        m = ScalarQuadratic()
        with pytest.raises(ValueError):
            estimator_order_fit(m, m.init_params(1.0), np.zeros((1, 1)),
                                np.array([[0.0]]), COST, [0.1, 0.05],
                                QUAD_RELAX)


class TestExchange:
    def test_gap_vanishes_at_stationarity(self):
        rng = make_rng(26)
        q = rng.standard_normal((4, 4))
        a_mat = q @ q.T + 4 * np.eye(4)
        gap = stationarity_exchange_gap(a_mat, rng.standard_normal(4),
                                        rng.standard_normal(4),
                                        rng.standard_normal(4),
                                        theta=0.3, beta=0.2)
        assert gap < 1e-8


class TestEstimatorAgainstOracles:
    def test_symmetric_estimator_matches_fd_on_hopfield(self):
        rng = make_rng(27)
        m, p, x, y, relax, s_star = make_interior_hopfield(rng)
        beta = 1e-4
        plus = relax_nudged(m, p, x, y, COST, beta, s_star, relax)
        minus = relax_nudged(m, p, x, y, COST, -beta, s_star, relax)
        est = grad_symmetric(m, p, x, plus.state, minus.state, beta)
        fd = finite_diff_loss_grad(m, p, x, y, COST, relax, h=1e-3)
        mask = np.abs(fd.ravel()) > 1e-6
        rel = np.abs(est.grads.ravel() - fd.ravel())[mask] / \
            np.abs(fd.ravel())[mask]
        assert np.max(rel) < 1e-3
