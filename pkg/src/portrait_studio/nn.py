"""Small multilayer perceptrons and the Adam optimizer.

Parameters live as named numpy arrays so they serialize directly into the
checkpoint container; they are wrapped in Tensors only while a graph is
being built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalError
from .tensor import Tensor, as_tensor

_ACTIVATIONS = ("tanh", "softsign", "sigmoid", "softplus", "identity")


@dataclass
class MLPParams:
    """Weights and biases for a fully connected net with one activation tag."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise InvalidInputError(f"layer {i} shapes disagree with widths {self.widths}")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def copy(self) -> "MLPParams":
        return MLPParams(list(self.widths), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


def mlp_init(widths: list[int], rng: np.random.Generator, activation: str = "tanh",
             scale: float = 1.0, dtype=np.float64) -> MLPParams:
    """Glorot-scaled random init; deterministic for a given generator state."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = scale * np.sqrt(2.0 / (fan_in + fan_out))
        weights.append((rng.standard_normal((fan_in, fan_out)) * std).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MLPParams(list(widths), weights, biases, activation)


def _activate(x: Tensor, tag: str) -> Tensor:
    if tag == "tanh":
        return x.tanh()
    if tag == "softsign":
        return x.softsign()
    if tag == "sigmoid":
        return x.sigmoid()
    if tag == "softplus":
        return x.softplus()
    return x


def mlp_apply(params: MLPParams, x, *, weights: list[Tensor] | None = None,
              biases: list[Tensor] | None = None) -> Tensor:
    """Apply the net to ``x`` (last dim = input width); activation on hidden layers only.

    When the caller optimizes the parameters it passes Tensor-wrapped
    ``weights``/``biases`` built from ``params`` so gradients reach them.
    """
    x = as_tensor(x)
    if x.shape[-1] != params.in_width:
        raise InvalidInputError(
            f"input width {x.shape[-1]} != expected {params.in_width}")
    ws = weights if weights is not None else [Tensor(w) for w in params.weights]
    bs = biases if biases is not None else [Tensor(b) for b in params.biases]
    h = x
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w + b
        if i != last:
            h = _activate(h, params.activation)
    return h


@dataclass
class AdamState:
    """Per-array Adam accumulators with the usual bias-corrected update."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One Adam update; returns the advanced state and updated parameters."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if grads.shape != params.shape:
        raise InvalidInputError(f"grad shape {grads.shape} != param shape {params.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite gradient at index {idx}")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return new_state, new_params


@dataclass
class AdamGroup:
    """Adam over a named set of arrays; mutates the dict passed to ``step``."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.states.get(name)
            if st is None or st.lr != self.lr:
                st = AdamState(self.lr, self.beta1, self.beta2, self.eps,
                               step=0 if st is None else st.step,
                               m=None if st is None else st.m,
                               v=None if st is None else st.v)
            new_st, new_p = adam_step(st, p, g)
            self.states[name] = new_st
            params[name][...] = new_p
