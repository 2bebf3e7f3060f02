"""Trajectory-level two-phase learning for mechanical (Lagrangian) systems.

A trajectory is trained rather than a fixed point: the free phase makes the
discretized action stationary given an initial state and velocity, the nudged
phase makes the action plus beta times the accumulated cost stationary, and
parameter gradients come from the difference of action parameter-derivatives
along the two trajectories.
"""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .energy_models import EnergyModel
from .numerics import SolverConfig, fd_jacobian, newton_damped
from .params import ParamSet


@dataclass
class Trajectory:
    dt: float
    states: np.ndarray                 # [steps+1, dim]
    velocities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError("states must be [steps+1, dim] with steps >= 1")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("non-finite trajectory entries")

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1


class LagrangianModel(ABC):
    """Kinetic-minus-potential dynamics contract: the scalar function of
    (params, input, state, velocity) plus its analytic partials, and a
    per-time cost. mass == 0 marks velocity-free (static) systems."""

    mass: float = 1.0

    @abstractmethod
    def lagrangian(self, params: ParamSet, x, s, sdot) -> float: ...

    @abstractmethod
    def dl_ds(self, params: ParamSet, x, s, sdot) -> np.ndarray: ...

    @abstractmethod
    def dl_dsdot(self, params: ParamSet, x, s, sdot) -> np.ndarray: ...

    @abstractmethod
    def dl_dtheta(self, params: ParamSet, x, s, sdot) -> ParamSet: ...

    @abstractmethod
    def cost(self, s, y) -> float: ...

    @abstractmethod
    def cost_grad(self, s, y) -> np.ndarray: ...


class OscillatorLagrangian(LagrangianModel):
    """0.5*m*sdot^2 - 0.5*k*s^2 with trainable stiffness k (any dim)."""

    def __init__(self, mass: float = 1.0):
        if mass <= 0:
            raise ValueError("mass must be positive (use a velocity-free "
                             "model for the massless case)")
        self.mass = float(mass)

    def init_params(self, k: float = 1.0) -> ParamSet:
        return ParamSet({"k": np.array([k])})

    def lagrangian(self, params, x, s, sdot):
        return float(0.5 * self.mass * np.sum(sdot * sdot)
                     - 0.5 * params["k"][0] * np.sum(s * s))

    def dl_ds(self, params, x, s, sdot):
        return -params["k"][0] * np.asarray(s, dtype=np.float64)

    def dl_dsdot(self, params, x, s, sdot):
        return self.mass * np.asarray(sdot, dtype=np.float64)

    def dl_dtheta(self, params, x, s, sdot):
        return ParamSet({"k": np.array([-0.5 * float(np.sum(s * s))])})

    def cost(self, s, y):
        d = np.asarray(s) - np.asarray(y)
        return 0.5 * float(np.sum(d * d))

    def cost_grad(self, s, y):
        return np.asarray(s, dtype=np.float64) - np.asarray(y, dtype=np.float64)


class StaticEnergyLagrangian(LagrangianModel):
    """Velocity-free wrapper around an equilibrium energy model: the scalar
    function is minus the energy, so a constant input yields a constant
    trajectory pinned at the model's equilibrium."""

    mass = 0.0

    def __init__(self, model: EnergyModel, cost_fn):
        self.model = model
        self.cost_fn = cost_fn

    def _layers(self, s):
        return self.model.unpack(np.asarray(s, dtype=np.float64)[None])

    def lagrangian(self, params, x, s, sdot):
        return -float(self.model.energy(params, np.atleast_2d(x),
                                        self._layers(s))[0])

    def dl_ds(self, params, x, s, sdot):
        g = self.model.state_grad(params, np.atleast_2d(x), self._layers(s))
        return -self.model.pack(g)[0]

    def dl_dsdot(self, params, x, s, sdot):
        return np.zeros_like(np.asarray(s, dtype=np.float64))

    def dl_dtheta(self, params, x, s, sdot):
        return self.model.param_grad(params, np.atleast_2d(x),
                                     self._layers(s)).scale(-1.0)

    def cost(self, s, y):
        out = self._layers(s)[-1]
        return float(np.mean(self.cost_fn.cost(out, np.atleast_2d(y))))

    def cost_grad(self, s, y):
        out = self._layers(s)[-1]
        g = [np.zeros_like(layer) for layer in self._layers(s)]
        g[-1] = self.cost_fn.cost_grad(out, np.atleast_2d(y))
        return self.model.pack(g)[0]


def _x_at(x_traj, t):
    return None if x_traj is None else x_traj[t]


def discrete_action(model: LagrangianModel, params: ParamSet, x_traj,
                    traj: Trajectory) -> float:
    """Left-Riemann sum of the scalar function over the trajectory, with
    one-sided difference velocities."""
    s = traj.states
    if x_traj is not None and len(x_traj) < traj.steps + 1:
        raise ValueError(f"input trajectory too short: {len(x_traj)} < "
                         f"{traj.steps + 1}")
    total = 0.0
    for t in range(traj.steps):
        sdot = (s[t + 1] - s[t]) / traj.dt
        total += model.lagrangian(params, _x_at(x_traj, t), s[t], sdot) * traj.dt
    return total


def trajectory_cost(model: LagrangianModel, traj: Trajectory, y_traj) -> float:
    """Accumulated per-time cost (left Riemann sum)."""
    return sum(model.cost(traj.states[t], y_traj[t]) * traj.dt
               for t in range(traj.steps))


def _action_param_grad(model, params, x_traj, traj: Trajectory) -> ParamSet:
    s, dt = traj.states, traj.dt
    total = None
    for t in range(traj.steps):
        sdot = (s[t + 1] - s[t]) / dt
        g = model.dl_dtheta(params, _x_at(x_traj, t), s[t], sdot).scale(dt)
        total = g if total is None else total + g
    return total


def solve_trajectory(model: LagrangianModel, params: ParamSet, x_traj,
                     s0, sdot0, steps: int, dt: float = 0.01,
                     beta: float = 0.0, y_traj=None,
                     cfg: Optional[SolverConfig] = None) -> Trajectory:
    """Find the trajectory making the discrete action (plus beta times the
    accumulated cost) stationary over its interior states.

    The initial state and velocity are held fixed: s_1 comes from a
    half-step Taylor start and carries no stationarity equation of its own.
    Stationarity is imposed at t = 1..steps-1, which is exactly the damped
    Verlet recursion; the terminal state is free. Newton starts from the
    forward-integrated trajectory. Velocity-free systems (mass == 0) drop
    the inertial terms and solve each interior state's stationarity instead.
    """
    cfg = cfg or SolverConfig(max_iters=100, tol=1e-10)
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    dim = s0.size
    if beta != 0.0 and y_traj is None:
        raise ValueError("nudged solve needs a target trajectory")

    def cgrad(t, s):
        if beta == 0.0 or y_traj is None:
            return 0.0
        return beta * model.cost_grad(s, y_traj[t])

    states = np.zeros((steps + 1, dim))
    states[0] = s0
    if model.mass == 0.0:
        # static chain: each interior state satisfies dL/ds + beta dc/ds = 0
        def residual(u):
            ss = u.reshape(steps - 1, dim) if steps > 1 else u.reshape(0, dim)
            out = np.empty_like(ss)
            for t in range(1, steps):
                out[t - 1] = model.dl_ds(params, _x_at(x_traj, t), ss[t - 1],
                                         np.zeros(dim)) + cgrad(t, ss[t - 1])
            return out.ravel()

        u0 = np.tile(s0, steps - 1)
        if steps > 1:
            u, _, _ = newton_damped(residual,
                                    lambda v: fd_jacobian(residual, v),
                                    u0, cfg)
            states[1:steps] = np.atleast_1d(u).reshape(steps - 1, dim)
        states[steps] = states[steps - 1]
        return Trajectory(dt=dt, states=states)

    sdot0 = np.atleast_1d(np.asarray(sdot0, dtype=np.float64))
    acc0 = (model.dl_ds(params, _x_at(x_traj, 0), s0, sdot0)
            + cgrad(0, s0)) / model.mass
    states[1] = s0 + dt * sdot0 + 0.5 * dt * dt * acc0
    for t in range(1, steps):
        force = model.dl_ds(params, _x_at(x_traj, t), states[t],
                            (states[t] - states[t - 1]) / dt) + cgrad(t, states[t])
        states[t + 1] = (2 * states[t] - states[t - 1]
                         + dt * dt * force / model.mass)
    if steps < 2:
        return Trajectory(dt=dt, states=states)

    def residual(u):
        ss = np.concatenate([states[:2], u.reshape(steps - 1, dim)])
        out = np.empty((steps - 1, dim))
        for t in range(1, steps):
            sdot_prev = (ss[t] - ss[t - 1]) / dt
            sdot_here = (ss[t + 1] - ss[t]) / dt
            xt = _x_at(x_traj, t)
            out[t - 1] = (dt * (model.dl_ds(params, xt, ss[t], sdot_here)
                                + cgrad(t, ss[t]))
                          + model.dl_dsdot(params, _x_at(x_traj, t - 1),
                                           ss[t - 1], sdot_prev)
                          - model.dl_dsdot(params, xt, ss[t], sdot_here))
        return out.ravel()

    u0 = states[2:].ravel()
    u, _, _ = newton_damped(residual, lambda v: fd_jacobian(residual, v),
                            u0, cfg)
    states[2:] = np.atleast_1d(u).reshape(steps - 1, dim)
    return Trajectory(dt=dt, states=states)


def lagrangian_eqprop_grad(model: LagrangianModel, params: ParamSet, x_traj,
                           y_traj, s0, sdot0, steps: int, dt: float = 0.01,
                           beta: float = 1e-3, symmetric: bool = False,
                           cfg: Optional[SolverConfig] = None) -> ParamSet:
    """Two-trajectory estimate of the gradient of the accumulated cost:
    difference of the action's parameter-derivative along the nudged and
    free trajectories, over beta (or the +/-beta pair over 2 beta)."""
    if beta == 0:
        raise ValueError("beta must be nonzero")
    kw = dict(x_traj=x_traj, s0=s0, sdot0=sdot0, steps=steps, dt=dt, cfg=cfg)
    plus = solve_trajectory(model, params, beta=beta, y_traj=y_traj, **kw)
    if symmetric:
        minus = solve_trajectory(model, params, beta=-beta, y_traj=y_traj,
                                 **kw)
        diff = (_action_param_grad(model, params, x_traj, plus)
                - _action_param_grad(model, params, x_traj, minus))
        return diff.scale(0.5 / beta)
    free = solve_trajectory(model, params, beta=0.0, y_traj=None, **kw)
    diff = (_action_param_grad(model, params, x_traj, plus)
            - _action_param_grad(model, params, x_traj, free))
    return diff.scale(1.0 / beta)


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """Dump (time, state components) rows for offline plotting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        dim = traj.states.shape[1]
        w.writerow(["t"] + [f"s{k}" for k in range(dim)])
        for t in range(traj.steps + 1):
            w.writerow([repr(float(t * traj.dt))]
                       + [repr(float(v)) for v in traj.states[t]])
