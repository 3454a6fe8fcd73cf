"""Dense binary classifier trained with Adam, written directly against numpy.

Parameters live in one flat float64 vector. Each layer occupies a
contiguous block: the weight matrix (row-major, one row per output unit)
followed by the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SCORE_EPS = 1e-12
DEFAULT_HIDDEN = (20, 10, 5)


@dataclass(frozen=True)
class LayerSpec:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def for_features(cls, n_features: int, hidden: Sequence[int] = DEFAULT_HIDDEN) -> "LayerSpec":
        return cls((n_features, *hidden, 1))

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))

    def offsets(self) -> list[tuple[int, int, int]]:
        """(weight_start, bias_start, bias_end) for every layer."""
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            b0 = pos + fan_in * fan_out
            out.append((pos, b0, b0 + fan_out))
            pos = b0 + fan_out
        return out


@dataclass(frozen=True, eq=False)
class ModelWeights:
    values: np.ndarray
    spec: LayerSpec

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.spec.n_params:
            raise ValueError(
                f"expected {self.spec.n_params} parameters for {self.spec.dims}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("weights contain non-finite entries")
        object.__setattr__(self, "values", values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer, ``W`` shaped (fan_out, fan_in)."""
        dims = self.spec.dims
        res = []
        for (w0, b0, b1), fan_in, fan_out in zip(self.spec.offsets(), dims[:-1], dims[1:]):
            res.append((self.values[w0:b0].reshape(fan_out, fan_in), self.values[b0:b1]))
        return res


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, eta: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, eta, beta1, beta2, epsilon)


@dataclass(eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")
        if self.labels.size == 0:
            raise ValueError("empty batch")


def init_weights(spec: LayerSpec, seed: int) -> ModelWeights:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    for (w0, b0, _), fan_in, fan_out in zip(spec.offsets(), spec.dims[:-1], spec.dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        values[w0:b0] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return ModelWeights(values, spec)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_input(w: ModelWeights, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != w.spec.dims[0]:
        raise ValueError(f"network expects {w.spec.dims[0]} features, got {x.shape[1]}")
    return x


def _forward_pass(w: ModelWeights, x: np.ndarray):
    """Return hidden activations (input first) and the output logits."""
    acts = [x]
    layers = w.layers()
    h = x
    for W, b in layers[:-1]:
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    z = (h @ W.T + b)[:, 0]
    return acts, z


def forward(w: ModelWeights, features) -> np.ndarray:
    """Scores in (0, 1), clamped to ``[SCORE_EPS, 1 - SCORE_EPS]``."""
    _, z = _forward_pass(w, _check_input(w, features))
    return np.clip(_sigmoid(z), SCORE_EPS, 1.0 - SCORE_EPS)


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy."""
    f = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if f.size == 0:
        raise ValueError("empty input")
    if f.size != y.size:
        raise ValueError("scores and labels differ in length")
    f = np.clip(f, SCORE_EPS, 1.0 - SCORE_EPS)
    return float(-np.mean(y * np.log(f) + (1.0 - y) * np.log1p(-f)))


def gradient(w: ModelWeights, batch: Batch) -> np.ndarray:
    """Gradient of the mean BCE over ``batch`` in the flat parameter layout."""
    x = _check_input(w, batch.features)
    y = batch.labels
    acts, z = _forward_pass(w, x)
    n = y.size
    grad = np.empty_like(w.values)
    layers = w.layers()
    offsets = w.spec.offsets()

    # d(mean BCE)/dz for a sigmoid output
    delta = ((_sigmoid(z) - y) / n)[:, None]
    for idx in range(len(layers) - 1, -1, -1):
        w0, b0, b1 = offsets[idx]
        a_prev = acts[idx]
        grad[w0:b0] = (delta.T @ a_prev).ravel()
        grad[b0:b1] = delta.sum(axis=0)
        if idx > 0:
            W = layers[idx][0]
            delta = (delta @ W) * (a_prev > 0)
    return grad


def adam_step(state: AdamState, w: ModelWeights, g) -> tuple[AdamState, ModelWeights]:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != w.values.shape or state.m.shape != g.shape:
        raise ValueError("gradient, weights and optimizer state must have equal length")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = w.values - state.eta * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.eta, state.beta1, state.beta2, state.epsilon)
    return new_state, ModelWeights(new_values, w.spec)


def train_epochs(w: ModelWeights, features, labels, epochs: int, batch_size: int,
                 state: AdamState, rng: np.random.Generator) -> tuple[ModelWeights, AdamState, float]:
    """Run ``epochs`` passes of shuffled minibatch Adam over one local dataset.

    Returns the updated weights and optimizer state together with the mean
    BCE of the final weights over the whole dataset.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    if n == 0:
        raise ValueError("empty dataset")
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            g = gradient(w, Batch(x[idx], y[idx]))
            state, w = adam_step(state, w, g)
    return w, state, bce_loss(forward(w, x), y)


def average_weights(ws: Sequence[ModelWeights]) -> ModelWeights:
    if len(ws) == 0:
        raise ValueError("cannot average an empty list of weights")
    spec = ws[0].spec
    if any(w.spec != spec for w in ws):
        raise ValueError("weights have mismatched layouts")
    # running mean: exact for a single input and for identical inputs
    mean = ws[0].values.copy()
    for i, w in enumerate(ws[1:], start=2):
        mean += (w.values - mean) / i
    return ModelWeights(mean, spec)
