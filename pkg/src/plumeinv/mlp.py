"""Multilayer perceptron trained by pattern-wise backpropagation with momentum.

The weight correction for the connection from neuron ``i`` (output
``o_i``) to neuron ``j`` (local gradient ``delta_j``) is::

    dw_ji = eta * delta_j * o_i + alpha * dw_ji_old

which is steepest descent on half the sum-squared error plus a momentum
term. Biases are weights whose input is fixed at 1.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .source_receptor import EmissionVector, ObservationVector, TrainingSet

FORMAT_VERSION = 1

TOPOLOGIES = {
    "ANN-1": (6, 6, 12, 12),
    "ANN-2": (6, 7, 8, 12),
    "ANN-3": (6, 15, 30, 12),
}


def logsig(s):
    # tanh form is overflow-free for large |s|
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def tansig(s):
    return np.tanh(s)


def purelin(s):
    return s


# derivative expressed through the neuron output
_ACTIVATIONS = {
    "logsig": (logsig, lambda o: o * (1.0 - o)),
    "tansig": (tansig, lambda o: 1.0 - o * o),
    "purelin": (purelin, lambda o: np.ones_like(o)),
}


class ExtrapolationWarning(UserWarning):
    """An observation lies outside the range seen during training."""


@dataclass(frozen=True)
class Topology:
    """Layer sizes ``(input, hidden1, hidden2, output)``."""

    layer_sizes: tuple[int, int, int, int]

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) != 4:
            raise ValidationError(f"topology needs exactly two hidden layers (4 sizes), got {sizes}")
        if any(n < 1 for n in sizes):
            raise ValidationError(f"layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def parse(cls, text: str) -> "Topology":
        if text in TOPOLOGIES:
            return cls(TOPOLOGIES[text])
        try:
            return cls(tuple(int(v) for v in text.split(":")))
        except ValueError:
            raise ValidationError(f"bad topology {text!r}; expected e.g. 6:15:30:12") from None

    def __str__(self) -> str:
        return ":".join(str(n) for n in self.layer_sizes)


@dataclass
class MlpNetwork:
    """Weights ``W[l]`` map layer ``l`` to layer ``l+1`` and have shape ``(n_{l+1}, n_l)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    prev_dw: list[np.ndarray] = field(default_factory=list)
    prev_db: list[np.ndarray] = field(default_factory=list)
    epochs_trained: int = 0
    scaler: Scaler | None = None

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValidationError("need one weight matrix, bias vector and activation per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.size != w.shape[0]:
                raise ValidationError(f"layer {l + 1}: bias length {b.size} != {w.shape[0]} neurons")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValidationError(f"layer {l + 1}: fan-in {w.shape[1]} != {self.weights[l - 1].shape[0]}")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValidationError(f"unknown activation {a!r}; choose from {sorted(_ACTIVATIONS)}")
        if not self.prev_dw:
            self.prev_dw = [np.zeros_like(w) for w in self.weights]
        if not self.prev_db:
            self.prev_db = [np.zeros_like(b) for b in self.biases]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def topology(self) -> str:
        return ":".join(str(n) for n in self.layer_sizes)


def init_network(topology, seed: int = 0, activations: Sequence[str] | None = None) -> MlpNetwork:
    """Uniform weights in ``[-0.5, 0.5] / sqrt(fan_in)``, zero biases and momentum buffers."""
    if not isinstance(topology, Topology):
        topology = Topology.parse(topology) if isinstance(topology, str) else Topology(tuple(topology))
    sizes = topology.layer_sizes
    rng = np.random.default_rng(seed)
    weights = [rng.uniform(-0.5, 0.5, size=(n_out, n_in)) / math.sqrt(n_in)
               for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(n) for n in sizes[1:]]
    acts = list(activations) if activations is not None else ["logsig"] * (len(sizes) - 1)
    return MlpNetwork(weights, biases, acts)


def forward_pass(net: MlpNetwork, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Output and per-layer outputs (input layer first) for one pattern."""
    o = np.asarray(x, dtype=float).reshape(-1)
    if o.size != net.weights[0].shape[1]:
        raise ValidationError(f"input has {o.size} values, network expects {net.weights[0].shape[1]}")
    outs = [o]
    for w, b, a in zip(net.weights, net.biases, net.activations):
        o = _ACTIVATIONS[a][0](w @ o + b)
        outs.append(o)
    return o, outs


def predict(net: MlpNetwork, X) -> np.ndarray:
    """Batch forward pass; rows of ``X`` are patterns."""
    o = np.atleast_2d(np.asarray(X, dtype=float))
    for w, b, a in zip(net.weights, net.biases, net.activations):
        o = _ACTIVATIONS[a][0](o @ w.T + b)
    return o


def _local_gradients(net, outs, target):
    deltas = [None] * len(net.weights)
    o = outs[-1]
    deltas[-1] = (target - o) * _ACTIVATIONS[net.activations[-1]][1](o)
    for l in range(len(net.weights) - 2, -1, -1):
        o = outs[l + 1]
        deltas[l] = _ACTIVATIONS[net.activations[l]][1](o) * (net.weights[l + 1].T @ deltas[l + 1])
    return deltas


def sse_gradients(net: MlpNetwork, x, target) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """SSE of one pattern and its gradient with respect to every weight and bias."""
    target = np.asarray(target, dtype=float).reshape(-1)
    out, outs = forward_pass(net, x)
    deltas = _local_gradients(net, outs, target)
    gw = [-2.0 * np.outer(d, o) for d, o in zip(deltas, outs[:-1])]
    gb = [-2.0 * d for d in deltas]
    return float(np.sum((target - out) ** 2)), gw, gb


def weight_correction(eta: float, delta, o, alpha: float = 0.0, prev=0.0) -> np.ndarray:
    """``eta * delta_j * o_i + alpha * previous correction``."""
    return eta * np.multiply.outer(np.asarray(delta, dtype=float), np.asarray(o, dtype=float)) + alpha * np.asarray(prev)


def backprop_update(net: MlpNetwork, x, target, eta: float = 0.1, alpha: float = 0.5) -> float:
    """Apply one momentum backprop correction in place; returns the pre-update SSE."""
    target = np.asarray(target, dtype=float).reshape(-1)
    out, outs = forward_pass(net, x)
    deltas = _local_gradients(net, outs, target)
    for l, (d, o) in enumerate(zip(deltas, outs[:-1])):
        dw = eta * np.outer(d, o) + alpha * net.prev_dw[l]
        db = eta * d + alpha * net.prev_db[l]
        net.weights[l] += dw
        net.biases[l] += db
        net.prev_dw[l] = dw
        net.prev_db[l] = db
    return float(np.sum((target - out) ** 2))


@dataclass
class Scaler:
    """Min-max maps of inputs and targets onto ``band``."""

    x_min: np.ndarray
    x_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    band: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self):
        for name in ("x_min", "x_max", "y_min", "y_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if np.any(self.x_min >= self.x_max) or np.any(self.y_min >= self.y_max):
            raise ValidationError("scaler needs min < max in every dimension")
        if not self.band[0] < self.band[1]:
            raise ValidationError("scaler band must be increasing")

    @classmethod
    def fit(cls, X, Y, band=(0.1, 0.9)) -> "Scaler":
        """Fit to data; constant columns get a unit-wide range around their value."""
        def bounds(A):
            A = np.atleast_2d(np.asarray(A, dtype=float))
            lo, hi = A.min(axis=0), A.max(axis=0)
            flat = lo >= hi
            pad = 0.5 * np.maximum(np.abs(lo), 1.0)
            return np.where(flat, lo - pad, lo), np.where(flat, hi + pad, hi)
        x_min, x_max = bounds(X)
        y_min, y_max = bounds(Y)
        return cls(x_min, x_max, y_min, y_max, tuple(band))

    def _fwd(self, A, lo, hi):
        a, b = self.band
        return a + (b - a) * (np.asarray(A, dtype=float) - lo) / (hi - lo)

    def _inv(self, A, lo, hi):
        a, b = self.band
        return lo + (np.asarray(A, dtype=float) - a) * (hi - lo) / (b - a)

    def transform_x(self, X):
        return self._fwd(X, self.x_min, self.x_max)

    def inverse_x(self, X):
        return self._inv(X, self.x_min, self.x_max)

    def transform_y(self, Y):
        return self._fwd(Y, self.y_min, self.y_max)

    def inverse_y(self, Y):
        return self._inv(Y, self.y_min, self.y_max)

    def in_hull(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.x_min) and np.all(x <= self.x_max))


@dataclass(frozen=True)
class TrainingConfig:
    eta: float = 0.1
    alpha: float = 0.5
    max_iterations: int = 20_000
    seed: int = 0
    restore_best: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError(f"eta must be > 0, got {self.eta}")
        if not 0 <= self.alpha < 1:
            raise ValidationError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class TrainingHistory:
    train_sse: list[float] = field(default_factory=list)
    activation_sse: list[float] = field(default_factory=list)

    @property
    def best_epoch(self) -> int | None:
        if not self.activation_sse:
            return None
        return int(np.argmin(self.activation_sse)) + 1


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, TrainingSet):
        return data.C, data.S
    X, Y = data
    return np.atleast_2d(np.asarray(X, dtype=float)), np.atleast_2d(np.asarray(Y, dtype=float))


def train(net: MlpNetwork, training, activation=None, config: TrainingConfig = TrainingConfig(),
          scaler: Scaler | None = None) -> tuple[MlpNetwork, TrainingHistory]:
    """Train a copy of ``net`` for ``config.max_iterations`` epochs.

    ``training`` and ``activation`` are :class:`TrainingSet` objects (inputs
    are concentrations, targets emission rates) or ``(X, Y)`` arrays in
    physical units. Each epoch visits the training patterns once, in an order
    shuffled by a generator seeded from ``config.seed``. The history holds the
    summed per-pattern SSE of every epoch and, when an activation set is
    given, its SSE after the epoch. Both are in scaled units. With
    ``config.restore_best`` the returned weights are those of the epoch with
    the lowest activation SSE.
    """
    X, Y = _as_xy(training)
    if X.shape[0] == 0:
        raise ValidationError("empty training set")
    if scaler is None:
        scaler = Scaler.fit(X, Y)
    Xs, Ys = scaler.transform_x(X), scaler.transform_y(Y)
    if activation is not None:
        Xa, Ya = _as_xy(activation)
        Xa, Ya = scaler.transform_x(Xa), scaler.transform_y(Ya)

    net = copy.deepcopy(net)
    rng = np.random.default_rng(config.seed)
    history = TrainingHistory()
    eta, alpha = config.eta, config.alpha
    W, B, dW, dB = net.weights, net.biases, net.prev_dw, net.prev_db
    fns = [_ACTIVATIONS[a] for a in net.activations]
    n_layers = len(W)
    n = X.shape[0]
    best, best_sse = None, math.inf
    for _ in range(config.max_iterations):
        order = rng.permutation(n)
        total = 0.0
        for p in order:
            # inlined forward_pass/backprop_update for speed
            o = Xs[p]
            outs = [o]
            for l in range(n_layers):
                o = fns[l][0](W[l] @ o + B[l])
                outs.append(o)
            err = Ys[p] - o
            total += float(err @ err)
            d = err * fns[-1][1](o)
            for l in range(n_layers - 1, -1, -1):
                d_prev = fns[l - 1][1](outs[l]) * (W[l].T @ d) if l else None
                dw = eta * np.outer(d, outs[l]) + alpha * dW[l]
                db = eta * d + alpha * dB[l]
                W[l] += dw
                B[l] += db
                dW[l] = dw
                dB[l] = db
                d = d_prev
        history.train_sse.append(total)
        net.epochs_trained += 1
        if activation is not None:
            r = Ya - predict(net, Xa)
            sse = float(np.sum(r * r))
            history.activation_sse.append(sse)
            if config.restore_best and sse < best_sse:
                best_sse = sse
                best = copy.deepcopy((W, B, dW, dB, net.epochs_trained))
    if best is not None:
        W, B, dW, dB, _ = best
        net.weights, net.biases, net.prev_dw, net.prev_db = W, B, dW, dB
    net.scaler = scaler
    return net, history


def invert(net: MlpNetwork, scaler: Scaler | None, observation) -> EmissionVector:
    """Emission rates for one observation; flags and warns on extrapolation."""
    if scaler is None:
        scaler = net.scaler
    if scaler is None or net.epochs_trained < 1:
        raise ValidationError("network has not been trained")
    obs = observation if isinstance(observation, ObservationVector) else ObservationVector(observation)
    c = obs.concentrations
    if c.size != net.weights[0].shape[1]:
        raise ValidationError(f"observation has {c.size} values, network expects {net.weights[0].shape[1]}")
    out, _ = forward_pass(net, scaler.transform_x(c))
    rates = scaler.inverse_y(out)
    outside = not scaler.in_hull(c)
    if outside:
        warnings.warn("observation lies outside the training input range", ExtrapolationWarning, stacklevel=2)
    return EmissionVector(np.maximum(rates, 0.0), extrapolated=outside)


def _fmt_row(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def write_network(net: MlpNetwork, fh, scaler: Scaler | None = None, header: Sequence[str] = ()) -> None:
    """Versioned plain-text network dump; floats use shortest round-trip repr."""
    scaler = scaler if scaler is not None else net.scaler
    for line in header:
        fh.write(f"# {line}\n")
    fh.write(f"plumeinv-mlp {FORMAT_VERSION}\n")
    fh.write(f"topology {net.topology}\n")
    fh.write("activations " + " ".join(net.activations) + "\n")
    fh.write(f"epochs {net.epochs_trained}\n")
    for l, w in enumerate(net.weights, start=1):
        fh.write(f"layer {l} {w.shape[0]} {w.shape[1]}\n")
        for name, block in (("W", w), ("dW", net.prev_dw[l - 1])):
            fh.write(f"{name}\n")
            for row in block:
                fh.write(_fmt_row(row) + "\n")
        fh.write("b " + _fmt_row(net.biases[l - 1]) + "\n")
        fh.write("db " + _fmt_row(net.prev_db[l - 1]) + "\n")
    if scaler is not None:
        fh.write(f"scaler {_fmt_row(scaler.band)}\n")
        for name in ("x_min", "x_max", "y_min", "y_max"):
            fh.write(f"{name} {_fmt_row(getattr(scaler, name))}\n")
    fh.write("end\n")


def read_network(fh) -> tuple[MlpNetwork, Scaler | None]:
    lines = [(i, l.rstrip("\n")) for i, l in enumerate(fh, start=1) if l.strip() and not l.startswith("#")]
    pos = 0

    def take(prefix=None):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of network file")
        lineno, line = lines[pos]
        pos += 1
        parts = line.split()
        if prefix is not None and (not parts or parts[0] != prefix):
            raise ParseError(f"expected {prefix!r}", row=lineno)
        return lineno, parts

    def floats(lineno, parts):
        try:
            return np.array([float(v) for v in parts], dtype=float)
        except ValueError as exc:
            raise ParseError(str(exc), row=lineno) from None

    lineno, parts = take("plumeinv-mlp")
    if len(parts) != 2 or parts[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported network format {parts[1:]}", row=lineno)
    _, parts = take("topology")
    sizes = [int(v) for v in parts[1].split(":")]
    _, parts = take("activations")
    activations = parts[1:]
    _, parts = take("epochs")
    epochs = int(parts[1])
    weights, biases, dws, dbs = [], [], [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        take("layer")
        blocks = {}
        for name in ("W", "dW"):
            take(name)
            blocks[name] = np.vstack([floats(*take()) for _ in range(n_out)]).reshape(n_out, n_in)
        ln, parts = take("b")
        b = floats(ln, parts[1:])
        ln, parts = take("db")
        db = floats(ln, parts[1:])
        weights.append(blocks["W"])
        dws.append(blocks["dW"])
        biases.append(b)
        dbs.append(db)
    scaler = None
    lineno, parts = take()
    if parts[0] == "scaler":
        band = tuple(floats(lineno, parts[1:]))
        vals = {}
        for name in ("x_min", "x_max", "y_min", "y_max"):
            ln, p = take(name)
            vals[name] = floats(ln, p[1:])
        scaler = Scaler(band=band, **vals)
        lineno, parts = take()
    if parts[0] != "end":
        raise ParseError("expected 'end'", row=lineno)
    return MlpNetwork(weights, biases, activations, dws, dbs, epochs, scaler), scaler
