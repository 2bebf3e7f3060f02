"""Shared builders for the test suite.

Several checks compare exact linearizations (Hessians, adjoint ODEs,
per-step increments) against relaxed states of clipped-activation networks.
Those comparisons are only meaningful when the fixed point is strictly
interior to the clip interval — a coordinate pinned at the boundary sits at
a kink of the update map where the one-sided derivatives disagree. The
builders below resample until the fixed point is interior.
"""

import numpy as np
import pytest

from eqprop_lab.energy_models import (FcPrimitiveNet, LayeredHopfield,
                                      SquaredError)
from eqprop_lab.eqprop_core import RelaxConfig, relax_free
from eqprop_lab.numerics import make_rng


def interior(state, margin=1e-3):
    return all(np.all((l > margin) & (l < 1 - margin)) for l in state)


def make_interior_hopfield(rng, max_dim=5, n_layers=3,
                           relax=None):
    """Random layered Hopfield net with a strictly interior fixed point.

    Mildly positive weights (0.25*|Glorot| + 0.12) with inputs in (0.2, 0.8)
    reliably settle in the interior of (0, 1).
    Returns (model, params, x, y, relax_cfg, free_state).
    """
    relax = relax or RelaxConfig(max_iters=50000, tol=1e-13, epsilon=0.2)
    cost_dims = None
    while True:
        sizes = [int(rng.integers(2, max_dim)) for _ in range(n_layers)]
        m = LayeredHopfield(sizes)
        p = m.init_params(rng).map(lambda t: 0.25 * np.abs(t) + 0.12)
        x = rng.uniform(0.2, 0.8, (1, sizes[0]))
        y = rng.uniform(0.3, 0.7, (1, sizes[-1]))
        free = relax_free(m, p, x, relax)
        if free.converged and interior(free.state):
            return m, p, x, y, relax, free.state


def make_interior_fc_primitive(rng, T=80):
    """Random discrete-time fc net whose free trajectory settles interior."""
    while True:
        sizes = [int(rng.integers(3, 7)) for _ in range(4)]
        net = FcPrimitiveNet(sizes)
        p = net.init_params(make_rng(int(rng.integers(1 << 30))), bias0=0.5)
        for name in list(p):
            if name.startswith("W"):
                p[name] = 0.2 * p[name]
        x = rng.uniform(0.2, 0.8, (1, sizes[0]))
        y = rng.uniform(0.3, 0.7, (1, sizes[-1]))
        free = relax_free(net, p, x, RelaxConfig(max_iters=T, tol=0.0))
        if interior(free.state, margin=1e-6):
            return net, p, x, y


@pytest.fixture
def sq_cost():
    return SquaredError()


def find_mnist_or_skip():
    from eqprop_lab import data as dm
    paths = dm.find_mnist(dm.data_dir())
    if paths is None:
        pytest.skip("MNIST IDX files not available (set EQPROP_DATA_DIR; "
                    "see scripts/fetch_mnist.py)")
    return paths


def find_cifar_or_skip():
    from eqprop_lab import data as dm
    path = dm.find_cifar10(dm.data_dir())
    if path is None:
        pytest.skip("CIFAR-10 binary batch not available (set "
                    "EQPROP_DATA_DIR; see scripts/fetch_cifar10.py)")
    return path
