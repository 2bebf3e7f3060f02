import numpy as np
import pytest

from conftest import make_interior_hopfield
from eqprop_lab.energy_models import (FcPrimitiveNet, LayeredHopfield,
                                      ScalarQuadratic, SquaredError)
from eqprop_lab.eqprop_core import (RelaxConfig, TrainConfig, chl_step,
                                    estimate_batch_grad, evaluate,
                                    grad_one_sided, grad_symmetric,
                                    relax_free, relax_nudged, sgd_step, train)
from eqprop_lab.numerics import DivergenceError, make_rng
from eqprop_lab.params import ParamSet


QUAD_RELAX = RelaxConfig(max_iters=20000, tol=1e-14, epsilon=0.3)


class TestRelax:
    def test_quadratic_settles_at_theta(self):
        m = ScalarQuadratic()
        p = m.init_params(1.7)
        free = relax_free(m, p, np.zeros((1, 1)), QUAD_RELAX)
        assert free.converged
        np.testing.assert_allclose(free.state[0], [[1.7]], atol=1e-10)

    def test_hopfield_energy_nonincreasing(self):
        # gradient descent with a small step never increases the energy
        rng = make_rng(3)
        m, p, x, y, relax, s_star = make_interior_hopfield(rng)
        cfg = RelaxConfig(max_iters=60, tol=0.0, epsilon=0.05)
        s = m.init_state(1)
        prev = float(m.energy(p, x, s)[0])
        for _ in range(60):
            res = relax_free(m, p, x, RelaxConfig(max_iters=1, tol=0.0,
                                                  epsilon=0.05), s0=s)
            s = res.state
            e = float(m.energy(p, x, s)[0])
            assert e <= prev + 1e-12
            prev = e

    def test_nudged_pulls_output_toward_target(self):
        m = ScalarQuadratic()
        p = m.init_params(1.0)
        cost = SquaredError()
        y = np.array([[0.0]])
        free = relax_free(m, p, np.zeros((1, 1)), QUAD_RELAX)
        nudged = relax_nudged(m, p, np.zeros((1, 1)), y, cost, 0.5,
                              free.state, QUAD_RELAX)
        assert abs(nudged.state[0][0, 0]) < abs(free.state[0][0, 0])

    def test_divergence_raises(self):
        m = ScalarQuadratic()
        p = m.init_params(1.0)
        # epsilon = 3 makes the map s <- s - 3(s - theta) expansive
        with np.errstate(over="ignore"), pytest.raises(DivergenceError):
            relax_free(m, p, np.zeros((1, 1)),
                       RelaxConfig(max_iters=10000, tol=0.0, epsilon=3.0))

    def test_trajectory_recording(self):
        m = ScalarQuadratic()
        p = m.init_params(1.0)
        res = relax_nudged(m, p, np.zeros((1, 1)), np.array([[0.0]]),
                           SquaredError(), 0.0, m.init_state(1),
                           RelaxConfig(max_iters=5, tol=0.0), record=True)
        assert len(res.trajectory) == 6


class TestEstimators:
    """On E = 0.5(s-theta)^2, C = 0.5(s-y)^2: s*(beta) = (theta+beta*y)/(1+beta)
    gives the one-sided estimate (theta-y)/(1+beta) and the symmetric estimate
    (theta-y)/(1-beta^2); both approach dL/dtheta = theta-y."""

    def setup_method(self):
        self.m = ScalarQuadratic()
        self.p = self.m.init_params(2.0)
        self.cost = SquaredError()
        self.x = np.zeros((1, 1))
        self.y = np.array([[0.5]])
        self.free = relax_free(self.m, self.p, self.x, QUAD_RELAX)

    def _nudged(self, beta):
        return relax_nudged(self.m, self.p, self.x, self.y, self.cost, beta,
                            self.free.state, QUAD_RELAX).state

    def test_one_sided_closed_form(self):
        beta = 0.1
        est = grad_one_sided(self.m, self.p, self.x, self.free.state,
                             self._nudged(beta), beta)
        np.testing.assert_allclose(est.grads["theta"], [1.5 / 1.1], atol=1e-9)

    def test_symmetric_closed_form(self):
        beta = 0.1
        est = grad_symmetric(self.m, self.p, self.x, self._nudged(beta),
                             self._nudged(-beta), beta)
        np.testing.assert_allclose(est.grads["theta"], [1.5 / (1 - 0.01)],
                                   atol=1e-9)

    def test_bias_orders(self):
        exact = 1.5
        errs1, errs2 = [], []
        for beta in (0.2, 0.1, 0.05):
            e1 = grad_one_sided(self.m, self.p, self.x, self.free.state,
                                self._nudged(beta), beta)
            e2 = grad_symmetric(self.m, self.p, self.x, self._nudged(beta),
                                self._nudged(-beta), beta)
            errs1.append(abs(e1.grads["theta"][0] - exact))
            errs2.append(abs(e2.grads["theta"][0] - exact))
        # halving beta roughly halves the one-sided error, quarters the other
        assert errs1[0] / errs1[2] == pytest.approx(4, rel=0.3)
        assert errs2[0] / errs2[2] == pytest.approx(16, rel=0.3)

    def test_zero_beta_rejected(self):
        with pytest.raises(ValueError):
            grad_one_sided(self.m, self.p, self.x, self.free.state,
                           self.free.state, 0.0)
        with pytest.raises(ValueError):
            grad_symmetric(self.m, self.p, self.x, self.free.state,
                           self.free.state, 0.0)

    def test_primitive_model_orientation(self):
        """The phi-side two-point rule must also return +dL/dtheta: pushing
        parameters along -grad must reduce the loss."""
        rng = make_rng(11)
        net = FcPrimitiveNet([3, 5, 2])
        p = net.init_params(rng)
        x = rng.uniform(0.1, 0.9, (4, 3))
        y = rng.uniform(0.2, 0.8, (4, 2))
        cost = SquaredError()
        cfg = TrainConfig(T=60, K=15, beta=0.2)
        free, est = estimate_batch_grad(net, p, x, y, cost, cfg)
        loss0 = float(np.mean(cost.cost(free.state[-1], y)))
        p2 = sgd_step(p, est, lr=0.05)
        free2 = relax_free(net, p2, x, RelaxConfig(max_iters=60, tol=1e-10))
        loss1 = float(np.mean(cost.cost(free2.state[-1], y)))
        assert loss1 < loss0


class TestSgdStep:
    def test_subtracts_with_per_name_rates(self):
        p = ParamSet({"a": np.array([1.0]), "b": np.array([1.0])})
        g = ParamSet({"a": np.array([1.0]), "b": np.array([1.0])})
        out = sgd_step(p, g, lr=0.1, lrs={"b": 0.5})
        np.testing.assert_allclose(out["a"], [0.9])
        np.testing.assert_allclose(out["b"], [0.5])

    def test_misaligned_grad_rejected(self):
        p = ParamSet({"a": np.array([1.0])})
        with pytest.raises(ValueError):
            sgd_step(p, ParamSet({"z": np.array([1.0])}), 0.1)


class TestTrainLoop:
    def _toy_data(self, rng, n=60):
        # two linearly separable blobs in 4-D, one-hot targets
        labels = rng.integers(0, 2, n)
        x = rng.normal(0.35, 0.08, (n, 4))
        x[labels == 1] += 0.3
        y = np.eye(2)[labels]
        return np.clip(x, 0, 1), y

    def test_training_reduces_error(self):
        rng = make_rng(12)
        x, y = self._toy_data(rng)
        net = FcPrimitiveNet([4, 8, 2])
        p = net.init_params(rng)
        cfg = TrainConfig(T=30, K=10, beta=0.5, epochs=5, batch_size=10,
                          lr=0.1)
        rows = list(train(net, SquaredError(), p, x, y, x, y, cfg, rng))
        assert len(rows) == 5
        assert rows[-1]["test_error"] < rows[0]["test_error"] or \
            rows[-1]["test_error"] <= 10.0
        for row in rows:
            assert 0.0 <= row["train_error"] <= 100.0
            assert row["wall_s"] > 0

    def test_beta_sign_randomization_changes_stream(self):
        rng = make_rng(13)
        x, y = self._toy_data(rng, n=20)
        net = FcPrimitiveNet([4, 6, 2])
        p = net.init_params(make_rng(99))
        cfg = TrainConfig(T=30, K=10, beta=0.5, epochs=1, batch_size=10,
                          beta_sign_randomization=True)
        rows = list(train(net, SquaredError(), p.copy(), x, y, x, y, cfg,
                          make_rng(1)))
        rows2 = list(train(net, SquaredError(), p.copy(), x, y, x, y, cfg,
                           make_rng(1)))
        # same seed: identical; the randomization is part of the rng stream
        assert rows[0]["mean_loss"] == rows2[0]["mean_loss"]

    def test_evaluate_bounds(self):
        rng = make_rng(14)
        x, y = self._toy_data(rng, n=30)
        net = FcPrimitiveNet([4, 6, 2])
        p = net.init_params(rng)
        err, loss = evaluate(net, p, SquaredError(), x, y,
                             TrainConfig(T=30, K=5, beta=0.5))
        assert 0.0 <= err <= 100.0 and loss >= 0.0


class TestChl:
    def test_zero_update_when_output_already_clamped_value(self):
        """If the free equilibrium output already equals the target, the
        clamped phase changes nothing and the update vanishes."""
        rng = make_rng(15)
        m, p, x, y, relax, s_star = make_interior_hopfield(rng)
        y_eq = s_star[-1]
        delta, l_chl = chl_step(m, p, x, y_eq, relax)
        assert abs(l_chl) < 1e-8
        assert float(np.max(np.abs(delta.ravel()))) < 1e-6

    def test_contrastive_loss_nonnegative(self):
        # clamping outputs away from equilibrium can only raise the energy
        rng = make_rng(16)
        m, p, x, y, relax, _ = make_interior_hopfield(rng)
        _, l_chl = chl_step(m, p, x, y, relax)
        assert l_chl > -1e-10
