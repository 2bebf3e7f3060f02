"""Concrete energy functions, primitive functions and cost functions.

Conventions used throughout:

* Layered states are lists of float64 arrays with a leading batch axis,
  ``s[k]`` of shape ``[B, n_k]`` (or ``[B, C, H, W]`` for conv layers).
* Clamped inputs ``x`` take part in synaptic terms but never in the leak
  term; they enter raw (no activation applied to the input layer).
* Energy models expose ``E`` and its exact partials; primitive models expose
  the scalar ``phi`` whose state-gradient (after clipping) is the transition
  map of the discrete-time dynamics.  The effective energy of a primitive
  model is ``0.5*||s||^2 - phi``.
* ``param_grad``/``phi_param_grad`` return batch means, so a batch of one
  gives the per-sample derivative.
"""

from __future__ import annotations

import abc
from typing import List, Sequence

import numpy as np

from .numerics import (as_tensor, conv2d, conv2d_input_grad, conv2d_kernel_grad,
                       hard_sigmoid, hard_sigmoid_deriv, inverse_pool, pool,
                       pool_gather)
from .params import ParamSet


def _sigma(tag: str):
    if tag == "hard-sigmoid":
        return hard_sigmoid, hard_sigmoid_deriv
    if tag == "identity":
        return (lambda s: np.asarray(s, dtype=np.float64),
                lambda s: np.ones_like(np.asarray(s, dtype=np.float64)))
    raise ValueError(f"unknown activation tag {tag!r}")


# ---------------------------------------------------------------------------
# abstract contracts

class EnergyModel(abc.ABC):
    """(theta, x, s) -> E with exact partials dE/ds and dE/dtheta."""

    #: clip interval applied by the relaxation dynamics, or None
    state_clip: tuple[float, float] | None = None

    @abc.abstractmethod
    def init_state(self, batch: int) -> List[np.ndarray]: ...

    @abc.abstractmethod
    def energy(self, params: ParamSet, x, s) -> np.ndarray: ...

    @abc.abstractmethod
    def state_grad(self, params: ParamSet, x, s) -> List[np.ndarray]: ...

    @abc.abstractmethod
    def param_grad(self, params: ParamSet, x, s) -> ParamSet: ...

    def energy_terms(self, params: ParamSet, x, s):
        """Sum-separability view: (parameter-free term, {name: factor term});
        the pieces add up to energy()."""
        raise NotImplementedError

    # flattening helpers (single-sample verification oracles) ---------------
    def pack(self, s) -> np.ndarray:
        return np.concatenate([layer.reshape(layer.shape[0], -1) for layer in s],
                              axis=1)

    def unpack(self, flat: np.ndarray) -> List[np.ndarray]:
        out, pos = [], 0
        b = flat.shape[0]
        for shape in self.layer_shapes():
            n = int(np.prod(shape))
            out.append(flat[:, pos:pos + n].reshape(b, *shape))
            pos += n
        return out

    @abc.abstractmethod
    def layer_shapes(self) -> List[tuple]: ...

    def batch_of(self, x) -> int:
        x = np.asarray(x)
        return 1 if x.ndim == 1 else x.shape[0]


class PrimitiveModel(abc.ABC):
    """Discrete-time model defined by a primitive function phi; the free
    dynamics iterates the (clipped) state-gradient of phi."""

    @abc.abstractmethod
    def init_state(self, batch: int) -> List[np.ndarray]: ...

    @abc.abstractmethod
    def phi(self, params: ParamSet, x, s) -> np.ndarray: ...

    @abc.abstractmethod
    def transition(self, params: ParamSet, x, s) -> List[np.ndarray]: ...

    @abc.abstractmethod
    def phi_param_grad(self, params: ParamSet, x, s) -> ParamSet: ...

    @abc.abstractmethod
    def transition_vjp(self, params: ParamSet, x, s, g): ...

    @abc.abstractmethod
    def layer_shapes(self) -> List[tuple]: ...

    pack = EnergyModel.pack
    unpack = EnergyModel.unpack
    batch_of = EnergyModel.batch_of


class CostFn(abc.ABC):
    """Cost on the output layer: C(o, y) >= 0 with exact gradient."""

    @abc.abstractmethod
    def cost(self, o: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def cost_grad(self, o: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def predict(self, o: np.ndarray) -> np.ndarray:
        return np.argmax(o, axis=1)


# ---------------------------------------------------------------------------
# cost functions

def squared_error(o, y):
    """C = 0.5*||o-y||^2 per sample; gradient o-y (output coordinates only)."""
    o = as_tensor(o)
    y = as_tensor(y)
    if o.shape != y.shape:
        raise ValueError(f"shape mismatch {o.shape} vs {y.shape}")
    d = o - y
    if o.ndim == 1:
        return 0.5 * float(d @ d), d
    return 0.5 * np.sum(d * d, axis=1), d


class SquaredError(CostFn):
    def cost(self, o, y):
        return squared_error(o, y)[0]

    def cost_grad(self, o, y):
        return squared_error(o, y)[1]


def softmax_xent(w_out, s_last, y):
    """Softmax readout o = softmax(w_out @ s_last) with cross-entropy cost.

    Returns (cost, dC/ds_last, dC/dw_out); the readout weight gradient is the
    exact loss gradient (o - y) s_last^T (batch mean), oriented like w_out.
    """
    w_out = as_tensor(w_out)
    s_last = as_tensor(s_last)
    y = as_tensor(y)
    single = s_last.ndim == 1
    if single:
        s_last, y = s_last[None], y[None]
    if not (np.all((y == 0) | (y == 1)) and np.all(np.sum(y, axis=1) == 1)):
        raise ValueError("y must be one-hot")
    logits = s_last @ w_out.T
    logits = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits)
    o = e / np.sum(e, axis=1, keepdims=True)
    cost = -np.sum(y * np.log(np.maximum(o, 1e-300)), axis=1)
    s_grad = (o - y) @ w_out
    wout_grad = (o - y).T @ s_last / s_last.shape[0]
    if single:
        return float(cost[0]), s_grad[0], wout_grad
    return cost, s_grad, wout_grad


class SoftmaxReadout(CostFn):
    """Cross-entropy on a linear readout of the last hidden layer. The
    readout weight is a trainable parameter of the cost, not of the model."""

    def __init__(self, w_out):
        self.w_out = as_tensor(w_out)

    def cost(self, o, y):
        return softmax_xent(self.w_out, o, y)[0]

    def cost_grad(self, o, y):
        return softmax_xent(self.w_out, o, y)[1]

    def wout_grad(self, o, y):
        return softmax_xent(self.w_out, o, y)[2]

    def probs(self, o):
        logits = np.atleast_2d(o) @ self.w_out.T
        logits = logits - np.max(logits, axis=1, keepdims=True)
        e = np.exp(logits)
        return e / np.sum(e, axis=1, keepdims=True)

    def predict(self, o):
        return np.argmax(self.probs(o), axis=1)


# ---------------------------------------------------------------------------
# Hopfield energy (continuous layered network)

def _norm_weights(W) -> List[np.ndarray]:
    if isinstance(W, ParamSet):
        names = sorted((n for n in W.names() if n.startswith("W")),
                       key=lambda n: int(n[1:]))
        return [W[n] for n in names]
    return [as_tensor(w) for w in W]


def hopfield_energy(W, x, s, sigma: str = "hard-sigmoid") -> np.ndarray:
    """E = 0.5*sum_i s_i^2 - sum_synapses W_ij act(s_i) act(s_j), on a layered
    chain. Clamped inputs x feed the first synaptic block raw and carry no
    leak term. Self-connections are excluded by construction."""
    act, _ = _sigma(sigma)
    weights = _norm_weights(W)
    x = np.atleast_2d(as_tensor(x))
    s = [np.atleast_2d(as_tensor(layer)) for layer in s]
    if len(weights) != len(s):
        raise ValueError("one weight block per free layer required")
    e = 0.5 * sum(np.sum(layer * layer, axis=1) for layer in s)
    pre = x
    for w, layer in zip(weights, s):
        if pre.shape[1] != w.shape[0] or layer.shape[1] != w.shape[1]:
            raise ValueError(f"layer/W shape mismatch: {pre.shape} {w.shape}")
        e = e - np.einsum("bi,ij,bj->b", pre, w, act(layer), optimize=True)
        pre = act(layer)
    return e


def hopfield_grads(W, x, s, sigma: str = "hard-sigmoid"):
    """(dE/ds per layer, dE/dW ParamSet, batch mean for the weights)."""
    act, dact = _sigma(sigma)
    weights = _norm_weights(W)
    x = np.atleast_2d(as_tensor(x))
    s = [np.atleast_2d(as_tensor(layer)) for layer in s]
    pres = [x] + [act(layer) for layer in s]
    state_grads = []
    for k, layer in enumerate(s):
        drive = pres[k] @ weights[k]
        if k + 1 < len(s):
            drive = drive + pres[k + 2] @ weights[k + 1].T
        state_grads.append(layer - dact(layer) * drive)
    b = x.shape[0]
    pg = ParamSet({f"W{k + 1}": -(pres[k].T @ pres[k + 1]) / b
                   for k in range(len(weights))})
    return state_grads, pg


class LayeredHopfield(EnergyModel):
    """Chain-architecture continuous Hopfield network; layer k couples only
    to layers k-1 and k+1, state clipped to [0,1] by the dynamics."""

    state_clip = (0.0, 1.0)

    def __init__(self, sizes: Sequence[int], sigma: str = "hard-sigmoid"):
        if len(sizes) < 2:
            raise ValueError("need input and at least one free layer")
        self.sizes = [int(n) for n in sizes]
        self.sigma = sigma

    def init_params(self, rng, scale: float | None = None) -> ParamSet:
        """Glorot-uniform weights: U(+-sqrt(6/(fan_in+fan_out)))."""
        p = ParamSet()
        for k in range(1, len(self.sizes)):
            fan_in, fan_out = self.sizes[k - 1], self.sizes[k]
            lim = scale if scale is not None else np.sqrt(6.0 / (fan_in + fan_out))
            p[f"W{k}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        return p

    def layer_shapes(self):
        return [(n,) for n in self.sizes[1:]]

    def init_state(self, batch: int):
        return [np.zeros((batch, n)) for n in self.sizes[1:]]

    def _weights(self, params):
        return [params[f"W{k}"] for k in range(1, len(self.sizes))]

    def energy(self, params, x, s):
        return hopfield_energy(self._weights(params), x, s, self.sigma)

    def state_grad(self, params, x, s):
        return hopfield_grads(self._weights(params), x, s, self.sigma)[0]

    def param_grad(self, params, x, s):
        return hopfield_grads(self._weights(params), x, s, self.sigma)[1]

    def energy_terms(self, params, x, s):
        act, _ = _sigma(self.sigma)
        x = np.atleast_2d(as_tensor(x))
        free = 0.5 * sum(np.sum(layer * layer, axis=1) for layer in s)
        terms = {}
        pre = x
        for k, layer in enumerate(s):
            terms[f"W{k + 1}"] = -np.einsum(
                "bi,ij,bj->b", pre, params[f"W{k + 1}"], act(layer))
            pre = act(layer)
        return free, terms

    # single-sample second derivatives (verification oracles) ---------------
    def _coupling_matrix(self, params) -> np.ndarray:
        """Symmetric free-state coupling W-hat (chain blocks, zero diagonal)."""
        dim = sum(self.sizes[1:])
        w_hat = np.zeros((dim, dim))
        offs = np.cumsum([0] + self.sizes[1:])
        for k in range(2, len(self.sizes)):
            a, b = offs[k - 2], offs[k - 1]
            c, d = offs[k - 1], offs[k]
            w_hat[a:b, c:d] = params[f"W{k}"]
            w_hat[c:d, a:b] = params[f"W{k}"].T
        return w_hat

    def state_hessian(self, params, x, s) -> np.ndarray:
        """d2E/ds2 at a single sample (B must be 1). Uses the a.e.-zero second
        derivative of the hard sigmoid, so this is exact on the interior."""
        _, dact = _sigma(self.sigma)
        flat = self.pack(s)[0]
        g = np.concatenate([dact(layer[0]) for layer in s])
        w_hat = self._coupling_matrix(params)
        return np.eye(flat.size) - np.outer(g, g) * w_hat

    def cross_apply(self, params, x, s, v: np.ndarray) -> ParamSet:
        """(d2E/dtheta ds) . v for a single sample and flat direction v."""
        act, dact = _sigma(self.sigma)
        x = np.atleast_2d(as_tensor(x))
        vs = self.unpack(v[None])
        out = ParamSet()
        pres = [x[0]] + [act(layer[0]) for layer in s]
        for k in range(1, len(self.sizes)):
            term = -np.outer(pres[k - 1], dact(s[k - 1][0]) * vs[k - 1][0])
            if k >= 2:
                term = term - np.outer(dact(s[k - 2][0]) * vs[k - 2][0], pres[k])
            out[f"W{k}"] = term
        return out


# ---------------------------------------------------------------------------
# tiny analytic models used by the verification oracles

class ScalarQuadratic(EnergyModel):
    """E = 0.5*(s - theta)^2, one free scalar; the standard closed-form toy."""

    state_clip = None

    def __init__(self):
        pass

    def init_params(self, theta: float = 1.0) -> ParamSet:
        return ParamSet({"theta": np.array([theta])})

    def layer_shapes(self):
        return [(1,)]

    def init_state(self, batch):
        return [np.zeros((batch, 1))]

    def energy(self, params, x, s):
        d = s[0] - params["theta"][None, :]
        return 0.5 * np.sum(d * d, axis=1)

    def state_grad(self, params, x, s):
        return [s[0] - params["theta"][None, :]]

    def param_grad(self, params, x, s):
        return ParamSet({"theta": np.mean(params["theta"][None, :] - s[0], axis=0)})

    def energy_terms(self, params, x, s):
        return np.zeros(s[0].shape[0]), {"theta": self.energy(params, x, s)}

    def state_hessian(self, params, x, s):
        return np.eye(1)

    def cross_apply(self, params, x, s, v):
        return ParamSet({"theta": -np.asarray(v, dtype=np.float64)})


class GaussianPrecision(EnergyModel):
    """E = 0.5*theta*s^2 (precision-parameterized Gaussian energy)."""

    state_clip = None

    def init_params(self, theta: float = 1.0) -> ParamSet:
        return ParamSet({"theta": np.array([theta])})

    def layer_shapes(self):
        return [(1,)]

    def init_state(self, batch):
        return [np.zeros((batch, 1))]

    def energy(self, params, x, s):
        return 0.5 * params["theta"][0] * np.sum(s[0] * s[0], axis=1)

    def state_grad(self, params, x, s):
        return [params["theta"][0] * s[0]]

    def param_grad(self, params, x, s):
        return ParamSet({"theta": np.array([0.5 * np.mean(np.sum(s[0] * s[0],
                                                                 axis=1))])})

    def energy_terms(self, params, x, s):
        return np.zeros(s[0].shape[0]), {"theta": self.energy(params, x, s)}

    def state_hessian(self, params, x, s):
        return params["theta"][0] * np.eye(1)

    def cross_apply(self, params, x, s, v):
        return ParamSet({"theta": np.array([float(s[0][0, 0] * v[0])])})


class QuarticWell(EnergyModel):
    """E = 0.5*theta*s^2 + 0.25*s^4 (anharmonic cross-check energy)."""

    state_clip = None

    def init_params(self, theta: float = 1.0) -> ParamSet:
        return ParamSet({"theta": np.array([theta])})

    def layer_shapes(self):
        return [(1,)]

    def init_state(self, batch):
        return [np.zeros((batch, 1))]

    def energy(self, params, x, s):
        s2 = np.sum(s[0] * s[0], axis=1)
        return 0.5 * params["theta"][0] * s2 + 0.25 * s2 * s2

    def state_grad(self, params, x, s):
        return [params["theta"][0] * s[0] + s[0] ** 3]

    def param_grad(self, params, x, s):
        return ParamSet({"theta": np.array([0.5 * np.mean(np.sum(s[0] * s[0],
                                                                 axis=1))])})


# ---------------------------------------------------------------------------
# discrete-time primitive-function networks

def fc_primitive(w, h_prev, h) -> float:
    """Bilinear layer term h^T . w . h_prev."""
    w = as_tensor(w)
    h_prev = as_tensor(h_prev)
    h = as_tensor(h)
    if w.shape != (h.shape[-1], h_prev.shape[-1]):
        raise ValueError(f"shape mismatch: w {w.shape}, h {h.shape}, "
                         f"h_prev {h_prev.shape}")
    return float(h @ w @ h_prev)


def conv_primitive(w, h_prev, h, padding: int | None = None,
                   window: int = 2) -> float:
    """Scalar product of h with the pooled cross-correlation of h_prev.
    window=1 makes the pooling a no-op."""
    w = as_tensor(w)
    if padding is None:
        padding = w.shape[-1] // 2
    pooled, _ = pool(conv2d(w, as_tensor(h_prev), padding=padding), window)
    if pooled.shape != np.asarray(h).shape:
        raise ValueError(f"h shape {np.asarray(h).shape} does not match pooled "
                         f"shape {pooled.shape}")
    return float(np.sum(as_tensor(h) * pooled))


class FcPrimitiveNet(PrimitiveModel):
    """Fully-connected chain with hard-sigmoid updates
    h_k <- act(W_k h_{k-1} + W_{k+1}^T h_{k+1} + b_k)."""

    def __init__(self, sizes: Sequence[int], sigma: str = "hard-sigmoid",
                 with_bias: bool = True):
        self.sizes = [int(n) for n in sizes]
        self.sigma = sigma
        self.with_bias = with_bias

    def init_params(self, rng, bias0: float = 0.0) -> ParamSet:
        p = ParamSet()
        for k in range(1, len(self.sizes)):
            fan_in, fan_out = self.sizes[k - 1], self.sizes[k]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            p[f"W{k}"] = rng.uniform(-lim, lim, size=(fan_out, fan_in))
            if self.with_bias:
                p[f"b{k}"] = np.full(fan_out, float(bias0))
        return p

    def layer_shapes(self):
        return [(n,) for n in self.sizes[1:]]

    def init_state(self, batch):
        return [np.zeros((batch, n)) for n in self.sizes[1:]]

    def _nlayers(self):
        return len(self.sizes) - 1

    def phi(self, params, x, s):
        x = np.atleast_2d(as_tensor(x))
        hs = [x] + list(s)
        out = np.zeros(x.shape[0])
        for k in range(1, len(hs)):
            out = out + np.einsum("bi,ij,bj->b", hs[k], params[f"W{k}"],
                                  hs[k - 1], optimize=True)
            if self.with_bias:
                out = out + hs[k] @ params[f"b{k}"]
        return out

    def _preacts(self, params, x, s):
        x = np.atleast_2d(as_tensor(x))
        hs = [x] + list(s)
        acts = []
        for k in range(1, len(hs)):
            a = hs[k - 1] @ params[f"W{k}"].T
            if k + 1 < len(hs):
                a = a + hs[k + 1] @ params[f"W{k + 1}"]
            if self.with_bias:
                a = a + params[f"b{k}"]
            acts.append(a)
        return acts

    def transition(self, params, x, s):
        act, _ = _sigma(self.sigma)
        return [act(a) for a in self._preacts(params, x, s)]

    def phi_param_grad(self, params, x, s):
        x = np.atleast_2d(as_tensor(x))
        hs = [x] + list(s)
        b = x.shape[0]
        pg = ParamSet()
        for k in range(1, len(hs)):
            pg[f"W{k}"] = hs[k].T @ hs[k - 1] / b
            if self.with_bias:
                pg[f"b{k}"] = np.mean(hs[k], axis=0)
        return pg

    def transition_vjp(self, params, x, s, g):
        """Cotangents of one synchronous update. Returns (ds, dtheta) with
        theta-grads summed over the batch."""
        _, dact = _sigma(self.sigma)
        x = np.atleast_2d(as_tensor(x))
        hs = [x] + list(s)
        d = [gk * dact(a) for gk, a in zip(g, self._preacts(params, x, s))]
        gtheta = ParamSet()
        n = self._nlayers()
        for k in range(1, n + 1):
            gw = d[k - 1].T @ hs[k - 1]
            if k >= 2:
                gw = gw + hs[k].T @ d[k - 2]
            gtheta[f"W{k}"] = gw
            if self.with_bias:
                gtheta[f"b{k}"] = np.sum(d[k - 1], axis=0)
        gs = []
        for k in range(1, n + 1):
            gh = np.zeros_like(hs[k])
            if k + 1 <= n:
                gh = gh + d[k] @ params[f"W{k + 1}"]
            if k - 1 >= 1:
                gh = gh + d[k - 2] @ params[f"W{k}"].T
            gs.append(gh)
        return gs, gtheta


class ConvPrimitiveNet(PrimitiveModel):
    """Stack of conv+maxpool layers topped by fully-connected layers.

    Conv layer k: h_k <- act( P(w_k * h_{k-1}) + cb_k
                              + w~_{k+1} * P^-1(h_{k+1}) )
    where P is 2x2 argmax pooling and P^-1 scatters into the argmax positions
    recorded when pooling the current bottom-up pre-activation of the layer
    above (which makes the top-down term the exact adjoint of the bottom-up
    one). The first fc layer reads the flattened last conv layer.
    """

    def __init__(self, input_shape, conv_channels: Sequence[int],
                 fc_sizes: Sequence[int], ksize: int = 3,
                 sigma: str = "hard-sigmoid"):
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.conv_channels = [int(c) for c in conv_channels]
        self.fc_sizes = [int(n) for n in fc_sizes]
        self.ksize = int(ksize)
        if self.ksize % 2 == 0:
            raise ValueError("kernel size must be odd (same-padding layout)")
        self.pad = self.ksize // 2
        self.sigma = sigma
        c, h, w = self.input_shape
        self.conv_shapes = []
        for cout in self.conv_channels:
            if h % 2 or w % 2:
                raise ValueError("spatial extent must halve cleanly at each pool")
            h, w = h // 2, w // 2
            self.conv_shapes.append((cout, h, w))
        self.flat_dim = self.conv_shapes[-1][0] * h * w

    def init_params(self, rng, bias0: float = 0.0) -> ParamSet:
        p = ParamSet()
        cin = self.input_shape[0]
        for k, cout in enumerate(self.conv_channels, start=1):
            fan_in = cin * self.ksize ** 2
            fan_out = cout * self.ksize ** 2
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            p[f"w{k}"] = rng.uniform(-lim, lim,
                                     size=(cout, cin, self.ksize, self.ksize))
            p[f"cb{k}"] = np.full(cout, float(bias0))
            cin = cout
        nin = self.flat_dim
        for i, nout in enumerate(self.fc_sizes, start=1):
            lim = np.sqrt(6.0 / (nin + nout))
            p[f"W{i}"] = rng.uniform(-lim, lim, size=(nout, nin))
            p[f"fb{i}"] = np.full(nout, float(bias0))
            nin = nout
        return p

    def layer_shapes(self):
        return list(self.conv_shapes) + [(n,) for n in self.fc_sizes]

    def batch_of(self, x) -> int:
        x = np.asarray(x)
        return 1 if x.ndim == 3 else x.shape[0]

    def init_state(self, batch):
        return ([np.zeros((batch, *shape)) for shape in self.conv_shapes]
                + [np.zeros((batch, n)) for n in self.fc_sizes])

    def _nconv(self):
        return len(self.conv_channels)

    def phi(self, params, x, s):
        x = as_tensor(x)
        if x.ndim == 3:
            x = x[None]
        out = np.zeros(x.shape[0])
        prev = x
        for k in range(1, self._nconv() + 1):
            h = s[k - 1]
            pooled, _ = pool(conv2d(params[f"w{k}"], prev, self.pad))
            out = out + np.sum(h * pooled, axis=(1, 2, 3))
            out = out + np.sum(h, axis=(2, 3)) @ params[f"cb{k}"]
            prev = h
        flat = prev.reshape(prev.shape[0], -1)
        hs = [flat] + list(s[self._nconv():])
        for i in range(1, len(self.fc_sizes) + 1):
            out = out + np.einsum("bi,ij,bj->b", hs[i], params[f"W{i}"],
                                  hs[i - 1], optimize=True)
            out = out + hs[i] @ params[f"fb{i}"]
        return out

    def _bottom_up(self, params, x, s):
        """Per conv layer: (pooled pre-activation, argmax indices)."""
        x = as_tensor(x)
        if x.ndim == 3:
            x = x[None]
        prev = x
        pooled_list, idx_list = [], []
        for k in range(1, self._nconv() + 1):
            pooled, idx = pool(conv2d(params[f"w{k}"], prev, self.pad))
            pooled_list.append(pooled)
            idx_list.append(idx)
            prev = s[k - 1]
        return pooled_list, idx_list

    def _preacts(self, params, x, s):
        nc = self._nconv()
        pooled, idx = self._bottom_up(params, x, s)
        acts = []
        for k in range(1, nc + 1):
            a = pooled[k - 1] + params[f"cb{k}"][None, :, None, None]
            if k < nc:
                up = inverse_pool(s[k], idx[k])
                a = a + conv2d_input_grad(params[f"w{k + 1}"], up, self.pad,
                                          up.shape[-2:])
            elif self.fc_sizes:
                top = (s[nc] @ params["W1"]).reshape(s[k - 1].shape)
                a = a + top
            acts.append(a)
        flat = s[nc - 1].reshape(s[nc - 1].shape[0], -1)
        hs = [flat] + list(s[nc:])
        for i in range(1, len(self.fc_sizes) + 1):
            a = hs[i - 1] @ params[f"W{i}"].T + params[f"fb{i}"]
            if i < len(self.fc_sizes):
                a = a + hs[i + 1] @ params[f"W{i + 1}"]
            acts.append(a)
        return acts, idx

    def transition(self, params, x, s):
        act, _ = _sigma(self.sigma)
        acts, _ = self._preacts(params, x, s)
        return [act(a) for a in acts]

    def phi_param_grad(self, params, x, s):
        x = as_tensor(x)
        if x.ndim == 3:
            x = x[None]
        b = x.shape[0]
        nc = self._nconv()
        _, idx = self._bottom_up(params, x, s)
        pg = ParamSet()
        prev = x
        for k in range(1, nc + 1):
            h = s[k - 1]
            scattered = inverse_pool(h, idx[k - 1])
            pg[f"w{k}"] = conv2d_kernel_grad(scattered, prev, self.pad,
                                             (self.ksize, self.ksize)) / b
            pg[f"cb{k}"] = np.mean(np.sum(h, axis=(2, 3)), axis=0)
            prev = h
        flat = prev.reshape(b, -1)
        hs = [flat] + list(s[nc:])
        for i in range(1, len(self.fc_sizes) + 1):
            pg[f"W{i}"] = hs[i].T @ hs[i - 1] / b
            pg[f"fb{i}"] = np.mean(hs[i], axis=0)
        return pg

    def transition_vjp(self, params, x, s, g):
        """Cotangents of one synchronous update (argmax positions treated as
        locally constant). Theta-grads are summed over the batch."""
        _, dact = _sigma(self.sigma)
        x = as_tensor(x)
        if x.ndim == 3:
            x = x[None]
        nc = self._nconv()
        acts, idx = self._preacts(params, x, s)
        d = [gk * dact(a) for gk, a in zip(g, acts)]
        prevs = [x] + list(s[:nc - 1])  # bottom-up inputs per conv layer
        gtheta = ParamSet()
        gs = [np.zeros_like(layer) for layer in s]
        for k in range(1, nc + 1):
            dk = d[k - 1]
            up_d = inverse_pool(dk, idx[k - 1])
            gw = conv2d_kernel_grad(up_d, prevs[k - 1], self.pad,
                                    (self.ksize, self.ksize))
            if k >= 2:
                # w_k also appears in layer k-1's top-down term
                up_h = inverse_pool(s[k - 1], idx[k - 1])
                gw = gw + conv2d_kernel_grad(up_h, d[k - 2], self.pad,
                                             (self.ksize, self.ksize))
                # h_{k-1} feeds layer k bottom-up ...
                gs[k - 2] += conv2d_input_grad(params[f"w{k}"], up_d, self.pad,
                                               prevs[k - 1].shape[-2:])
                # ... and the state of layer k enters layer k-1's top-down
                # scatter, whose adjoint is a gather at the stored argmaxes.
                gs[k - 1] += pool_gather(conv2d(params[f"w{k}"], d[k - 2],
                                                self.pad), idx[k - 1])
            gtheta[f"w{k}"] = gw
            gtheta[f"cb{k}"] = np.sum(dk, axis=(0, 2, 3))
        flat = s[nc - 1].reshape(s[nc - 1].shape[0], -1)
        hs = [flat] + list(s[nc:])
        nfc = len(self.fc_sizes)
        b = x.shape[0]
        for i in range(1, nfc + 1):
            di = d[nc + i - 1]
            gw = di.T @ hs[i - 1]
            if i >= 2:
                gw = gw + hs[i].T @ d[nc + i - 2]
            elif nfc:
                # W1's top-down counterpart lands in the last conv layer
                gw = gw + hs[1].T @ d[nc - 1].reshape(b, -1)
            gtheta[f"W{i}"] = gw
            gtheta[f"fb{i}"] = np.sum(di, axis=0)
        for i in range(1, nfc + 1):
            gh = np.zeros_like(hs[i])
            if i + 1 <= nfc:
                gh = gh + d[nc + i] @ params[f"W{i + 1}"]
            if i >= 2:
                gh = gh + d[nc + i - 2] @ params[f"W{i}"].T
            gs[nc + i - 1] += gh
        if nfc:
            # flattened last conv state feeds fc layer 1 bottom-up ...
            gs[nc - 1] += (d[nc] @ params["W1"]).reshape(s[nc - 1].shape)
            # ... and the first fc state's top-down term sits in the last
            # conv layer's pre-activation
            gs[nc] += d[nc - 1].reshape(b, -1) @ params["W1"].T
        return gs, gtheta


def layered_transition(model: PrimitiveModel, params, x, s):
    """Synchronous one-step update of every layer from the previous state."""
    return model.transition(params, x, s)


# ---------------------------------------------------------------------------
# physical example energies

def flow_energy(edges, k, p):
    """Dissipated power of a pipe/resistor flow network.

    P = sum_edges k_e (p_j - p_i)^2 over edges (i, j) with conductances k >= 0
    and node pressures p. Returns (P, dP/dk per edge, dP/dp per node).
    """
    k = as_tensor(k)
    p = as_tensor(p)
    if np.any(k < 0):
        raise ValueError("conductances must be nonnegative")
    total = 0.0
    dk = np.zeros(len(edges))
    dp = np.zeros_like(p)
    for e, (i, j) in enumerate(edges):
        d = p[j] - p[i]
        total += k[e] * d * d
        dk[e] = d * d
        dp[j] += 2 * k[e] * d
        dp[i] -= 2 * k[e] * d
    return float(total), dk, dp


def elastic_energy(edges, k, rest, positions):
    """Total spring energy sum 0.5*k_e*(r_e - rest_e)^2 over edges of a 3-D
    spring network. Returns (E, dE/dk, dE/drest, dE/dpositions)."""
    k = as_tensor(k)
    rest = as_tensor(rest)
    pos = as_tensor(positions)
    if np.any(k < 0) or np.any(rest < 0):
        raise ValueError("spring constants and rest lengths must be nonnegative")
    total = 0.0
    dk = np.zeros(len(edges))
    dl = np.zeros(len(edges))
    dpos = np.zeros_like(pos)
    for e, (i, j) in enumerate(edges):
        delta = pos[j] - pos[i]
        r = float(np.linalg.norm(delta))
        stretch = r - rest[e]
        total += 0.5 * k[e] * stretch * stretch
        dk[e] = 0.5 * stretch * stretch
        dl[e] = k[e] * (rest[e] - r)
        if r > 0:
            unit = delta / r
            dpos[j] += k[e] * stretch * unit
            dpos[i] -= k[e] * stretch * unit
    return float(total), dk, dl, dpos
