"""Nonlinear resistive-network simulator and conductance training.

Steady states solve Kirchhoff's current law (KCL) at every floating node with
a damped Newton iteration. Voltage-defining elements (voltage sources,
voltage-controlled voltage sources) are eliminated algebraically: every node
voltage is an affine function of the remaining free unknowns. Conductance
gradients come from the two-phase voltage-drop rule and need only quantities
measurable on the physical network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.optimize

from .numerics import SolverConfig, fd_jacobian, newton_damped
from .params import ParamSet

_EXP_CLAMP = 40.0


# ---------------------------------------------------------------------------
# devices

@dataclass
class LinearResistor:
    kind = "resistor"
    g: float
    trainable: bool = True

    def __post_init__(self):
        if self.g < 0:
            raise ValueError("conductance must be >= 0")


@dataclass
class DiodePair:
    """Two antiparallel diodes with series voltage shifts: the forward diode
    conducts for drops above shift_a, the backward one below shift_b; the
    pair is near-open on (shift_b, shift_a)."""
    kind = "diode_pair"
    i_s: float = 1e-9
    v_t: float = 0.025
    shift_a: float = 0.5
    shift_b: float = -0.5


@dataclass
class CurrentSource:
    kind = "current_source"
    current: float = 0.0


@dataclass
class VoltageSource:
    """Branch (i, j) pins V_i = V_j + u."""
    kind = "voltage_source"
    u: float = 0.0


@dataclass
class VCVS:
    """Voltage-controlled voltage source: branch (i, j) pins
    V_i = V_j + gain * (V_ctrl_p - V_ctrl_n)."""
    kind = "vcvs"
    gain: float
    ctrl_p: int
    ctrl_n: int


@dataclass
class CCCS:
    """Current-controlled current source: injects gain times the current
    supplied by the controlling voltage-defining branch, flowing i -> j."""
    kind = "cccs"
    gain: float
    ctrl_branch: int


_VOLTAGE_DEFINING = ("voltage_source", "vcvs")
_RESISTIVE = ("resistor", "diode_pair")


def _clamped_exp(z):
    return np.exp(np.minimum(z, _EXP_CLAMP))


def device_current(d, dv):
    """Current flowing i -> j through a branch at voltage drop dv = V_i - V_j.
    Only defined for devices whose current is a function of their own drop."""
    if d.kind == "resistor":
        return d.g * dv
    if d.kind == "diode_pair":
        fwd = d.i_s * (_clamped_exp((dv - d.shift_a) / d.v_t) - 1.0)
        bwd = d.i_s * (_clamped_exp((d.shift_b - dv) / d.v_t) - 1.0)
        return fwd - bwd
    if d.kind == "current_source":
        return d.current
    raise TypeError(f"current of a {d.kind} is not a function of its own "
                    f"voltage drop")


def device_pseudo_power(d, dv):
    """Integral of the branch characteristic from 0 to dv, in closed form.
    For a resistor this is half the dissipated power g*dv^2."""
    if d.kind == "resistor":
        return 0.5 * d.g * dv * dv
    if d.kind == "diode_pair":
        return d.i_s * d.v_t * (
            _clamped_exp((dv - d.shift_a) / d.v_t)
            - _clamped_exp(-d.shift_a / d.v_t)
            + _clamped_exp((d.shift_b - dv) / d.v_t)
            - _clamped_exp(d.shift_b / d.v_t))
    raise TypeError(f"pseudo-power undefined for {d.kind}")


def reversed_device(d):
    """The same physical element seen from the opposite terminal."""
    if d.kind == "resistor":
        return LinearResistor(g=d.g, trainable=d.trainable)
    if d.kind == "diode_pair":
        return DiodePair(i_s=d.i_s, v_t=d.v_t, shift_a=-d.shift_b,
                         shift_b=-d.shift_a)
    raise TypeError(f"cannot reverse {d.kind}")


# ---------------------------------------------------------------------------
# circuit

@dataclass
class Circuit:
    n_nodes: int
    branches: List[Tuple[int, int, object]] = field(default_factory=list)
    fixed: Dict[int, float] = field(default_factory=dict)
    input_nodes: List[int] = field(default_factory=list)
    outputs_pos: List[int] = field(default_factory=list)
    outputs_neg: List[int] = field(default_factory=list)

    def __post_init__(self):
        for i, j, _ in self.branches:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"branch endpoint out of range: ({i}, {j})")

    def add(self, i: int, j: int, device) -> int:
        if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
            raise ValueError(f"branch endpoint out of range: ({i}, {j})")
        self.branches.append((i, j, device))
        return len(self.branches) - 1

    def set_input(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self.input_nodes),):
            raise ValueError(f"expected {len(self.input_nodes)} input "
                             f"voltages, got shape {values.shape}")
        for node, v in zip(self.input_nodes, values):
            self.fixed[node] = float(v)

    def trainable_indices(self) -> List[int]:
        return [k for k, (_, _, d) in enumerate(self.branches)
                if d.kind == "resistor" and d.trainable]

    def conductances(self) -> np.ndarray:
        return np.array([self.branches[k][2].g
                         for k in self.trainable_indices()])

    def set_conductances(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        idx = self.trainable_indices()
        if g.shape != (len(idx),):
            raise ValueError(f"expected {len(idx)} conductances, got shape "
                             f"{g.shape}")
        if np.any(g < 0):
            raise ValueError("conductances must be >= 0")
        for k, val in zip(idx, g):
            self.branches[k][2].g = float(val)


@dataclass
class SteadyState:
    voltages: np.ndarray
    iters: int
    residual: float


def _affine_structure(c: Circuit):
    """Express every node voltage as v0 + D @ vu where vu are the voltages of
    the free (non-fixed, non-driven) nodes. Voltage-defining branches are
    resolved iteratively; cyclic definitions are rejected."""
    if not c.fixed:
        raise ValueError("circuit has no sourced node (nothing grounds it)")
    driven = {}
    for bidx, (i, j, d) in enumerate(c.branches):
        if d.kind in _VOLTAGE_DEFINING:
            if i in c.fixed or i in driven:
                raise ValueError(f"node {i} voltage is defined twice")
            driven[i] = (bidx, j, d)
    free = [n for n in range(c.n_nodes) if n not in c.fixed and n not in driven]
    col = {n: k for k, n in enumerate(free)}
    v0 = np.zeros(c.n_nodes)
    D = np.zeros((c.n_nodes, len(free)))
    resolved = set()
    for n, val in c.fixed.items():
        v0[n] = val
        resolved.add(n)
    for n in free:
        D[n, col[n]] = 1.0
        resolved.add(n)
    pending = dict(driven)
    for _ in range(len(pending) + 1):
        done = []
        for n, (bidx, j, d) in pending.items():
            if d.kind == "voltage_source":
                deps = [j]
            else:
                deps = [j, d.ctrl_p, d.ctrl_n]
            if not all(m in resolved for m in deps):
                continue
            v0[n] = v0[j]
            D[n] = D[j]
            if d.kind == "voltage_source":
                v0[n] += d.u
            else:
                v0[n] += d.gain * (v0[d.ctrl_p] - v0[d.ctrl_n])
                D[n] = D[n] + d.gain * (D[d.ctrl_p] - D[d.ctrl_n])
            resolved.add(n)
            done.append(n)
        for n in done:
            del pending[n]
        if not pending:
            break
    if pending:
        raise ValueError(f"cyclic voltage definitions at nodes "
                         f"{sorted(pending)}")
    return free, v0, D, driven


def _branch_and_node_currents(c: Circuit, V: np.ndarray, driven: dict):
    """Per-branch currents (i -> j) and the net current leaving each node.
    Voltage-defining branches carry whatever their node balance demands;
    controlled current sources are resolved after everything else."""
    nb = len(c.branches)
    I = np.zeros(nb)
    net = np.zeros(c.n_nodes)
    cccs = []
    for bidx, (i, j, d) in enumerate(c.branches):
        if d.kind in _VOLTAGE_DEFINING:
            continue
        if d.kind == "cccs":
            cccs.append((bidx, i, j, d))
            continue
        I[bidx] = device_current(d, V[i] - V[j])
        net[i] += I[bidx]
        net[j] -= I[bidx]
    # supplied current of each voltage-defining branch = what its node draws
    while cccs:
        progressed = False
        for item in list(cccs):
            bidx, i, j, d = item
            ci, _, cd = c.branches[d.ctrl_branch]
            if cd.kind not in _VOLTAGE_DEFINING:
                raise ValueError("controlling branch must be voltage-defining")
            # the controlled node's balance must not still be waiting on
            # another unresolved controlled source
            if any(other is not item and (i2 == ci or j2 == ci)
                   for other in cccs for _, i2, j2, _ in [other]):
                continue
            I[bidx] = d.gain * (-net[ci])  # current the source must supply
            net[i] += I[bidx]
            net[j] -= I[bidx]
            cccs.remove(item)
            progressed = True
        if not progressed:
            raise ValueError("cyclic controlled-source dependencies")
    return I, net


def solve_steady_state(c: Circuit, cfg: Optional[SolverConfig] = None,
                       injections: Optional[np.ndarray] = None,
                       warm_start: Optional[np.ndarray] = None) -> SteadyState:
    """Damped-Newton solve of KCL at the free nodes; `injections[n]` is an
    external current pushed into node n (used for output nudging)."""
    cfg = cfg or SolverConfig(max_iters=200, tol=1e-10)
    free, v0, D, driven = _affine_structure(c)
    inj = np.zeros(c.n_nodes) if injections is None else \
        np.asarray(injections, dtype=np.float64)

    def residual(vu):
        V = v0 + D @ vu
        _, net = _branch_and_node_currents(c, V, driven)
        return (net - inj)[free]

    if not free:
        V = v0.copy()
        _, net = _branch_and_node_currents(c, V, driven)
        return SteadyState(voltages=V, iters=0, residual=0.0)
    vu0 = np.zeros(len(free)) if warm_start is None else \
        np.asarray(warm_start, dtype=np.float64)[free]
    vu, iters, res = newton_damped(residual,
                                   lambda v: fd_jacobian(residual, v),
                                   vu0, cfg)
    return SteadyState(voltages=v0 + D @ np.atleast_1d(vu), iters=iters,
                       residual=res)


def total_pseudo_power(c: Circuit, V) -> float:
    """Sum of per-branch pseudo-powers at an arbitrary voltage configuration.
    Only meaningful when every branch is a two-terminal resistive element."""
    V = np.asarray(V, dtype=np.float64)
    total = 0.0
    for i, j, d in c.branches:
        if d.kind not in _RESISTIVE:
            raise TypeError(f"total pseudo-power undefined with a {d.kind}")
        total += device_pseudo_power(d, V[i] - V[j])
    return float(total)


def solve_by_minimization(c: Circuit,
                          injections: Optional[np.ndarray] = None
                          ) -> SteadyState:
    """Cross-check solver: minimize the total pseudo-power (minus injected
    source work) over the free node voltages. Valid only for purely resistive
    circuits, where the KCL residual is exactly the objective's gradient."""
    for _, _, d in c.branches:
        if d.kind not in _RESISTIVE:
            raise TypeError(f"pseudo-power minimization invalid with a "
                            f"{d.kind}")
    free, v0, D, driven = _affine_structure(c)
    inj = np.zeros(c.n_nodes) if injections is None else \
        np.asarray(injections, dtype=np.float64)

    def fun(vu):
        V = v0 + D @ vu
        return total_pseudo_power(c, V) - float(inj @ V)

    def jac(vu):
        V = v0 + D @ vu
        _, net = _branch_and_node_currents(c, V, driven)
        return (net - inj)[free]

    res = scipy.optimize.minimize(fun, np.zeros(len(free)), jac=jac,
                                  method="BFGS",
                                  options={"gtol": 1e-12, "maxiter": 2000})
    # BFGS stops on precision loss with the gradient around 1e-8; polish the
    # last digits with full Newton steps on the objective's gradient
    vu = res.x
    polish = 0
    while len(free) and np.max(np.abs(jac(vu))) > 1e-13 and polish < 8:
        vu = vu - np.linalg.solve(fd_jacobian(jac, vu), jac(vu))
        polish += 1
    V = v0 + D @ vu
    return SteadyState(voltages=V, iters=int(res.nit) + polish,
                       residual=float(np.max(np.abs(jac(vu))))
                       if len(free) else 0.0)


# ---------------------------------------------------------------------------
# two-phase conductance gradients

def circuit_output(c: Circuit, V: np.ndarray) -> np.ndarray:
    """Prediction vector: differential pairs if negative rails exist."""
    pos = V[np.asarray(c.outputs_pos, dtype=int)]
    if c.outputs_neg:
        return pos - V[np.asarray(c.outputs_neg, dtype=int)]
    return pos


@dataclass
class CircuitGrad:
    grad: np.ndarray          # +dL/dg per trainable resistor
    free: SteadyState
    nudged: SteadyState
    y_hat: np.ndarray
    cost: float


def circuit_eqprop_grad(c: Circuit, x, y, beta: float,
                        symmetric: bool = False,
                        cfg: Optional[SolverConfig] = None) -> CircuitGrad:
    """Two-phase conductance gradients for squared error on the outputs.

    Free phase: zero output currents. Nudged phase: inject -beta * dC/dY_hat
    at each output node, with dC/dY_hat held at its free-phase value. The
    per-resistor gradient uses only the squared voltage drops of the two
    phases: (dV_beta^2 - dV_0^2) / (2 beta), or the (+beta, -beta) difference
    over 4 beta for the symmetric variant.
    """
    if beta == 0:
        raise ValueError("beta must be nonzero")
    if x is not None:
        c.set_input(x)
    y = np.asarray(y, dtype=np.float64)
    free = solve_steady_state(c, cfg)
    y_hat = circuit_output(c, free.voltages)
    err = y_hat - y
    cost = 0.5 * float(err @ err)
    inj = np.zeros(c.n_nodes)
    for k, node in enumerate(c.outputs_pos):
        inj[node] = -beta * err[k]
    for k, node in enumerate(c.outputs_neg):
        inj[node] = beta * err[k]
    idx = c.trainable_indices()

    def drops_sq(V):
        return np.array([(V[c.branches[k][0]] - V[c.branches[k][1]]) ** 2
                         for k in idx])

    nudged = solve_steady_state(c, cfg, injections=inj,
                                warm_start=free.voltages)
    if symmetric:
        anti = solve_steady_state(c, cfg, injections=-inj,
                                  warm_start=free.voltages)
        grad = (drops_sq(nudged.voltages) - drops_sq(anti.voltages)) / (4 * beta)
    else:
        grad = (drops_sq(nudged.voltages) - drops_sq(free.voltages)) / (2 * beta)
    return CircuitGrad(grad=grad, free=free, nudged=nudged, y_hat=y_hat,
                       cost=cost)


def sign_sgd_update(g, grads, eta: float, g_min: float = 1e-4,
                    g_max: float = 1.0) -> np.ndarray:
    """g <- clip(g - eta * sign(grad), [g_min, g_max]): the update rule when
    only gradient signs are observable (drop got bigger vs smaller)."""
    g = g.ravel() if isinstance(g, ParamSet) else np.asarray(g, np.float64)
    gr = grads.ravel() if isinstance(grads, ParamSet) else \
        np.asarray(grads, np.float64)
    return np.clip(g - eta * np.sign(gr), g_min, g_max)


# ---------------------------------------------------------------------------
# deep analog network construction

def doubled_input(x) -> np.ndarray:
    """Complementary input encoding: each value and its negation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return np.concatenate([x, -x])


def build_analog_mlp(layer_sizes: List[int], rng: np.random.Generator,
                     amplifier_gain: float = 2.0,
                     diode: Optional[DiodePair] = None,
                     g_low: float = 0.05, g_high: float = 0.5,
                     bias_rail: float = 0.5) -> Circuit:
    """Deep analog network: crossbars of trainable conductances between
    stages, each hidden node loaded by an antiparallel diode pair and buffered
    by a bidirectional amplifier (forward voltage copy, backward current
    injection). Inputs are complement-encoded (2x nodes); each class gets a
    differential output pair with its own crossbar rows and load resistors.

    A pair of always-on rails at +/-bias_rail volts feeds every crossbar
    column through trainable conductances, giving each unit a bias (set
    bias_rail to 0 to omit the rails).
    """
    if len(layer_sizes) < 2 or any(n < 1 for n in layer_sizes):
        raise ValueError("need >= 2 layers of size >= 1")
    diode = diode or DiodePair()
    n_in = 2 * layer_sizes[0]
    hidden = layer_sizes[1:-1]
    n_out = 2 * layer_sizes[-1]
    n_rail = 2 if bias_rail else 0
    n_nodes = 1 + n_in + n_rail + 2 * sum(hidden) + n_out
    c = Circuit(n_nodes=n_nodes)
    c.fixed[0] = 0.0
    nxt = 1
    c.input_nodes = list(range(nxt, nxt + n_in))
    for n in c.input_nodes:
        c.fixed[n] = 0.0
    nxt += n_in
    rails = []
    if bias_rail:
        rails = [nxt, nxt + 1]
        c.fixed[rails[0]] = float(bias_rail)
        c.fixed[rails[1]] = -float(bias_rail)
        nxt += 2
    drive = list(c.input_nodes)
    for width in hidden:
        in_nodes = list(range(nxt, nxt + width))
        nxt += width
        out_nodes = list(range(nxt, nxt + width))
        nxt += width
        for node in in_nodes:
            sources = drive + rails
            fan_in = len(sources)
            for src in sources:
                g = rng.uniform(g_low, g_high) / np.sqrt(fan_in)
                c.add(src, node, LinearResistor(g=g))
            c.add(node, 0, DiodePair(i_s=diode.i_s, v_t=diode.v_t,
                                     shift_a=diode.shift_a,
                                     shift_b=diode.shift_b))
        for node, out in zip(in_nodes, out_nodes):
            amp = c.add(out, 0, VCVS(gain=amplifier_gain, ctrl_p=node,
                                     ctrl_n=0))
            c.add(0, node, CCCS(gain=amplifier_gain, ctrl_branch=amp))
        drive = out_nodes
    out_nodes = list(range(nxt, nxt + n_out))
    c.outputs_pos = out_nodes[:layer_sizes[-1]]
    c.outputs_neg = out_nodes[layer_sizes[-1]:]
    for node in out_nodes:
        sources = drive + rails
        fan_in = len(sources)
        for src in sources:
            g = rng.uniform(g_low, g_high) / np.sqrt(fan_in)
            c.add(src, node, LinearResistor(g=g))
        c.add(node, 0, LinearResistor(g=rng.uniform(g_low, g_high)))
    return c


# ---------------------------------------------------------------------------
# netlist serialization (JSON, bit-exact round trip)

def _device_to_json(d) -> dict:
    if d.kind == "resistor":
        return {"kind": d.kind, "g": d.g, "trainable": d.trainable}
    if d.kind == "diode_pair":
        return {"kind": d.kind, "i_s": d.i_s, "v_t": d.v_t,
                "shift_a": d.shift_a, "shift_b": d.shift_b}
    if d.kind == "current_source":
        return {"kind": d.kind, "current": d.current}
    if d.kind == "voltage_source":
        return {"kind": d.kind, "u": d.u}
    if d.kind == "vcvs":
        return {"kind": d.kind, "gain": d.gain, "ctrl_p": d.ctrl_p,
                "ctrl_n": d.ctrl_n}
    if d.kind == "cccs":
        return {"kind": d.kind, "gain": d.gain, "ctrl_branch": d.ctrl_branch}
    raise TypeError(f"unknown device kind {d.kind!r}")


def _device_from_json(obj: dict):
    kind = obj.get("kind")
    ctors = {"resistor": LinearResistor, "diode_pair": DiodePair,
             "current_source": CurrentSource, "voltage_source": VoltageSource,
             "vcvs": VCVS, "cccs": CCCS}
    if kind not in ctors:
        raise ValueError(f"unknown device kind {kind!r}")
    kwargs = {k: v for k, v in obj.items() if k != "kind"}
    return ctors[kind](**kwargs)


def save_netlist(c: Circuit, path) -> None:
    doc = {
        "n_nodes": c.n_nodes,
        "fixed": {str(k): v for k, v in c.fixed.items()},
        "input_nodes": c.input_nodes,
        "outputs_pos": c.outputs_pos,
        "outputs_neg": c.outputs_neg,
        "branches": [{"i": i, "j": j, "device": _device_to_json(d)}
                     for i, j, d in c.branches],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_netlist(path) -> Circuit:
    with open(path) as f:
        doc = json.load(f)
    c = Circuit(n_nodes=int(doc["n_nodes"]))
    c.fixed = {int(k): float(v) for k, v in doc["fixed"].items()}
    c.input_nodes = [int(n) for n in doc["input_nodes"]]
    c.outputs_pos = [int(n) for n in doc["outputs_pos"]]
    c.outputs_neg = [int(n) for n in doc["outputs_neg"]]
    for b in doc["branches"]:
        c.add(int(b["i"]), int(b["j"]), _device_from_json(b["device"]))
    return c
