import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqprop_lab.numerics import (DivergenceError, NonConvergenceError,
                                 SingularJacobianError, SolverConfig,
                                 as_tensor, conv2d, conv2d_input_grad,
                                 conv2d_kernel_grad, fd_jacobian,
                                 fixed_point_iterate, hard_sigmoid,
                                 hard_sigmoid_deriv, inverse_pool, make_rng,
                                 matmul, newton_damped, pool, pool_gather)


class TestAsTensor:
    def test_upcasts_to_float64(self):
        assert as_tensor(np.float32([1, 2])).dtype == np.float64

    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError):
            as_tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            as_tensor([np.inf])

    def test_shape_check(self):
        with pytest.raises(ValueError):
            as_tensor([1.0, 2.0], shape=(3,))


class TestRng:
    def test_deterministic(self):
        a = make_rng(42).standard_normal(8)
        b = make_rng(42).standard_normal(8)
        np.testing.assert_array_equal(a, b)

    def test_substreams_differ(self):
        a = make_rng(42, stream=0).standard_normal(8)
        b = make_rng(42, stream=1).standard_normal(8)
        assert not np.allclose(a, b)

    def test_seed_range(self):
        with pytest.raises(ValueError):
            make_rng(-1)
        with pytest.raises(ValueError):
            make_rng(2**64)


class TestHardSigmoid:
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
    def test_range_and_identity(self, vals):
        s = np.array(vals)
        out = hard_sigmoid(s)
        assert np.all((out >= 0) & (out <= 1))
        inside = (s > 0) & (s < 1)
        np.testing.assert_array_equal(out[inside], s[inside])

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert hard_sigmoid(np.array(lo)) <= hard_sigmoid(np.array(hi))

    def test_deriv_values(self):
        s = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
        np.testing.assert_array_equal(hard_sigmoid_deriv(s),
                                      [0.0, 0.5, 1.0, 0.5, 0.0])


class TestMatmul:
    def test_basic(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)
        np.testing.assert_allclose(matmul(a, b), a @ b)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestConv2d:
    def test_against_scipy(self):
        from scipy.signal import correlate2d
        rng = make_rng(0)
        k = rng.standard_normal((2, 3, 3, 3))
        x = rng.standard_normal((3, 6, 6))
        out = conv2d(k, x, padding=1)
        assert out.shape == (2, 6, 6)
        for co in range(2):
            ref = sum(correlate2d(x[ci], k[co, ci], mode="same")
                      for ci in range(3))
            np.testing.assert_allclose(out[co], ref, atol=1e-12)

    def test_adjoint_identities(self):
        # <conv(k, x), g> == <x, input_grad(k, g)> == <k, kernel_grad(g, x)>
        rng = make_rng(1)
        k = rng.standard_normal((2, 3, 3, 3))
        x = rng.standard_normal((4, 3, 6, 6))
        g = rng.standard_normal((4, 2, 6, 6))
        lhs = np.sum(conv2d(k, x, padding=1) * g)
        gx = conv2d_input_grad(k, g, 1, (6, 6))
        gk = conv2d_kernel_grad(g, x, 1, (3, 3))
        np.testing.assert_allclose(lhs, np.sum(x * gx), rtol=1e-12)
        np.testing.assert_allclose(lhs, np.sum(k * gk), rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, 2, 3, 3)), np.zeros((3, 5, 5)))


class TestPooling:
    def test_pool_max_and_scatter(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        pooled, idx = pool(x)
        np.testing.assert_array_equal(pooled[0], [[5, 7], [13, 15]])
        back = inverse_pool(pooled, idx)
        # scattered values land on the maxima, zeros elsewhere
        assert np.sum(back) == np.sum(pooled)
        np.testing.assert_array_equal(pool(back)[0], pooled)

    def test_gather_is_adjoint_of_scatter(self):
        rng = make_rng(2)
        base = rng.standard_normal((3, 8, 8))
        _, idx = pool(base)
        vals = rng.standard_normal((3, 4, 4))
        full = rng.standard_normal((3, 8, 8))
        lhs = np.sum(inverse_pool(vals, idx) * full)
        rhs = np.sum(vals * pool_gather(full, idx))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_indivisible_extent(self):
        with pytest.raises(ValueError):
            pool(np.zeros((3, 3)))


class TestSolvers:
    def test_fixed_point_contraction(self):
        s, iters, res = fixed_point_iterate(
            lambda v: 0.5 * v + 1.0, np.zeros(3),
            SolverConfig(max_iters=200, tol=1e-12))
        np.testing.assert_allclose(s, 2.0, atol=1e-10)
        assert res <= 1e-12 and iters < 200

    def test_fixed_point_divergence(self):
        with pytest.raises(DivergenceError):
            fixed_point_iterate(lambda v: np.full_like(v, np.inf), np.ones(2),
                                SolverConfig(max_iters=10, tol=0.0))

    def test_newton_cubic(self):
        v, iters, res = newton_damped(
            lambda v: v**3 - 8.0, lambda v: np.diag(3 * v**2),
            np.array([3.0]), SolverConfig(max_iters=50, tol=1e-12))
        np.testing.assert_allclose(v, [2.0], atol=1e-10)
        assert res <= 1e-12

    def test_newton_singular(self):
        with pytest.raises(SingularJacobianError):
            newton_damped(lambda v: v + 1.0, lambda v: np.zeros((1, 1)),
                          np.array([0.0]), SolverConfig())

    def test_newton_nonconvergence(self):
        with pytest.raises(NonConvergenceError):
            newton_damped(lambda v: np.arctan(v) + 2.0,  # no root
                          lambda v: np.diag(1 / (1 + v**2)),
                          np.array([0.0]),
                          SolverConfig(max_iters=5, tol=1e-12, damping=0.1))

    def test_fd_jacobian(self):
        def f(v):
            return np.array([v[0] * v[1], np.sin(v[0])])
        v = np.array([0.7, -0.3])
        ref = np.array([[v[1], v[0]], [np.cos(v[0]), 0.0]])
        np.testing.assert_allclose(fd_jacobian(f, v), ref, atol=1e-6)

    def test_solver_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iters=0)
        with pytest.raises(ValueError):
            SolverConfig(tol=-1.0)
        with pytest.raises(ValueError):
            SolverConfig(damping=0.0)
