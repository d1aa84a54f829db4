"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps one ndarray plus an optional gradient. Every operation
records vector-Jacobian closures against its parents; ``backward`` walks
the recorded graph once in reverse topological order. The op set is
exactly what the renderers, losses and optimizers in this package need,
nothing more general.

Convention: gradients accumulate in ``Tensor.grad`` as plain ndarrays of
the same shape and dtype as ``Tensor.data``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else None)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        # list of (parent Tensor, vjp) pairs; empty for leaves
        self._parents: list[tuple["Tensor", Callable[[Array], Array]]] = []

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ------------------------------------------------
    @staticmethod
    def _make(data: Array, parents: Sequence[tuple["Tensor", Callable[[Array], Array]]]) -> "Tensor":
        out = Tensor(data)
        live = [(p, fn) for p, fn in parents if p.requires_grad]
        if live:
            out.requires_grad = True
            out._parents = live
        return out

    def backward(self, seed: Array | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph leaves."""
        if seed is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        # reverse topological order by iterative DFS
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, Array] = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        o = as_tensor(other)
        data = self.data + o.data
        return Tensor._make(data, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (o, lambda g: _unbroadcast(g, o.data.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = as_tensor(other)
        data = self.data * o.data
        return Tensor._make(data, [
            (self, lambda g: _unbroadcast(g * o.data, self.data.shape)),
            (o, lambda g: _unbroadcast(g * self.data, o.data.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        data = self.data / o.data
        return Tensor._make(data, [
            (self, lambda g: _unbroadcast(g / o.data, self.data.shape)),
            (o, lambda g: _unbroadcast(-g * self.data / (o.data * o.data), o.data.shape)),
        ])

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        data = self.data ** e
        return Tensor._make(data, [(self, lambda g: g * e * self.data ** (e - 1.0))])

    def __matmul__(self, other):
        o = as_tensor(other)
        data = self.data @ o.data
        a, b = self.data, o.data

        def vjp_a(g: Array) -> Array:
            if a.ndim == 1:
                return g @ b.T if b.ndim == 2 else g * b
            return g @ np.swapaxes(b, -1, -2) if b.ndim >= 2 else np.outer(g, b)

        def vjp_b(g: Array) -> Array:
            if b.ndim == 1:
                return a.T @ g if a.ndim == 2 else a * g
            if a.ndim == 1:
                return np.outer(a, g)
            if a.ndim == 2:
                return a.T @ g
            # batched (..., m, k) @ (k, n): fold batch into rows
            ka = a.reshape(-1, a.shape[-1])
            kg = g.reshape(-1, g.shape[-1])
            return ka.T @ kg

        return Tensor._make(data, [(self, vjp_a), (o, vjp_b)])

    # -- elementwise functions ------------------------------------------
    def exp(self):
        data = np.exp(self.data)
        return Tensor._make(data, [(self, lambda g: g * data)])

    def log(self):
        return Tensor._make(np.log(self.data), [(self, lambda g: g / self.data)])

    def sqrt(self):
        data = np.sqrt(self.data)
        return Tensor._make(data, [(self, lambda g: g * 0.5 / data)])

    def sin(self):
        return Tensor._make(np.sin(self.data), [(self, lambda g: g * np.cos(self.data))])

    def cos(self):
        return Tensor._make(np.cos(self.data), [(self, lambda g: -g * np.sin(self.data))])

    def tanh(self):
        data = np.tanh(self.data)
        return Tensor._make(data, [(self, lambda g: g * (1.0 - data * data))])

    def sigmoid(self):
        data = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        return Tensor._make(data, [(self, lambda g: g * data * (1.0 - data))])

    def softsign(self):
        absx = np.abs(self.data)
        data = self.data / (1.0 + absx)
        return Tensor._make(data, [(self, lambda g: g / (1.0 + absx) ** 2)])

    def softplus(self):
        # stable: log(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|))
        x = self.data
        data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        sig = 0.5 * (np.tanh(0.5 * x) + 1.0)
        return Tensor._make(data, [(self, lambda g: g * sig)])

    # -- reductions and shape ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g: Array) -> Array:
            if axis is None:
                return np.full(self.data.shape, g, dtype=self.data.dtype)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape).copy()

        return Tensor._make(data, [(self, vjp)])

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def cumsum(self, axis: int):
        data = np.cumsum(self.data, axis=axis)

        def vjp(g: Array) -> Array:
            return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

        return Tensor._make(data, [(self, vjp)])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        return Tensor._make(data, [(self, lambda g: g.reshape(self.data.shape))])

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = self.data.transpose(axes)
        return Tensor._make(data, [(self, lambda g: g.transpose(inv))])

    def __getitem__(self, idx):
        data = self.data[idx]
        idx_tuple = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in idx_tuple)

        def vjp(g: Array) -> Array:
            out = np.zeros_like(self.data)
            if basic:
                out[idx] += g  # basic indexing never aliases elements
            else:
                np.add.at(out, idx, g)
            return out

        return Tensor._make(data, [(self, vjp)])


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(lo), int(hi))
        parents.append((t, (lambda s: (lambda g: g[tuple(s)]))(tuple(sl))))
    return Tensor._make(data, parents)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    parents = []
    for i, t in enumerate(tensors):
        parents.append((t, (lambda j: (lambda g: np.take(g, j, axis=axis)))(i)))
    return Tensor._make(data, parents)


def gather_rows(x: Tensor, index: Array) -> Tensor:
    """Select rows ``x[index]`` (first axis) with gradient scatter-add."""
    idx = np.asarray(index)
    data = x.data[idx]

    def vjp(g: Array) -> Array:
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return out

    return Tensor._make(data, [(x, vjp)])


def scatter_rows(values: Tensor, index: Array, n_rows: int, fill: float = 0.0) -> Tensor:
    """Place ``values`` at unique row positions of a new (n_rows, ...) tensor."""
    idx = np.asarray(index)
    data = np.full((n_rows,) + values.data.shape[1:], fill, dtype=values.data.dtype)
    data[idx] = values.data
    return Tensor._make(data, [(values, lambda g: g[idx])])


def custom_op(data: Array, parents: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    """Build a Tensor from a raw forward result plus explicit VJP closures."""
    return Tensor._make(data, parents)


def grad_check(f: Callable[[Tensor], Tensor], x: Array, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - fd| / (|analytic| + |fd| + 1e-12);
    the maximum over all coordinates of ``x`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad
    if analytic is None:
        analytic = np.zeros_like(x)
    flat = x.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        fd[i] = (hi - lo) / (2.0 * eps)
    a = analytic.reshape(-1)
    rel = np.abs(a - fd) / (np.abs(a) + np.abs(fd) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
