"""Reverse-mode automatic differentiation over a small, closed primitive set.

The tape records exactly seven primitives: matmul, add, multiply (elementwise),
silu, layernorm, concat, and sum_of_squares.  All values are float64 numpy
arrays.  The backward pass walks the tape in exact reverse execution order.
"""

from __future__ import annotations

import numpy as np

LAYERNORM_EPS = 1e-5


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value entering the tape")
    return arr


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def layernorm(x):
    """Normalize the last axis to zero mean / unit variance (eps-floored)."""
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (1.0 / np.sqrt(var + LAYERNORM_EPS))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One tape entry: a value plus the recipe to push adjoints backward."""

    __slots__ = ("value", "parents", "vjp", "name", "index")

    def __init__(self, value, parents, vjp, name, index):
        self.value = value
        self.parents = parents
        self.vjp = vjp  # grad_out -> tuple of parent adjoints, or None for leaves
        self.name = name
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records primitive applications in execution order.

    Use ``leaf`` for inputs/parameters, the primitive methods to build the
    graph, and ``grad`` to run the backward pass from a scalar loss.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def _record(self, value, parents, vjp, name):
        node = Node(value, parents, vjp, name, len(self._nodes))
        self._nodes.append(node)
        return node

    def leaf(self, value, name=None):
        return self._record(_as_f64(value), (), None, name)

    def matmul(self, a: Node, b: Node):
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(
                f"matmul: incompatible shapes {a.shape} x {b.shape}"
            )
        va, vb = a.value, b.value

        def vjp(g):
            return g @ vb.T, va.T @ g

        return self._record(va @ vb, (a, b), vjp, "matmul")

    def add(self, a: Node, b: Node):
        try:
            value = a.value + b.value
        except ValueError:
            raise ValueError(f"add: incompatible shapes {a.shape} + {b.shape}")

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record(value, (a, b), vjp, "add")

    def multiply(self, a: Node, b: Node):
        try:
            value = a.value * b.value
        except ValueError:
            raise ValueError(
                f"multiply: incompatible shapes {a.shape} * {b.shape}"
            )
        va, vb = a.value, b.value

        def vjp(g):
            return _unbroadcast(g * vb, a.shape), _unbroadcast(g * va, b.shape)

        return self._record(value, (a, b), vjp, "multiply")

    def silu(self, a: Node):
        va = a.value

        def vjp(g):
            return (g * silu_grad(va),)

        return self._record(silu(va), (a,), vjp, "silu")

    def layernorm(self, a: Node):
        va = a.value
        if va.shape[-1] < 1:
            raise ValueError(f"layernorm: empty last axis, shape {a.shape}")
        mu = va.mean(axis=-1, keepdims=True)
        centered = va - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        y = centered * inv

        def vjp(g):
            gmean = g.mean(axis=-1, keepdims=True)
            proj = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gmean - y * proj),)

        return self._record(y, (a,), vjp, "layernorm")

    def concat(self, parts):
        parts = tuple(parts)
        if not parts:
            raise ValueError("concat: empty input list")
        lead = parts[0].value.shape[:-1]
        for p in parts:
            if p.value.shape[:-1] != lead:
                raise ValueError(
                    "concat: leading shapes differ: "
                    + ", ".join(str(p.shape) for p in parts)
                )
        widths = [p.value.shape[-1] for p in parts]
        splits = np.cumsum(widths)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=-1))

        value = np.concatenate([p.value for p in parts], axis=-1)
        return self._record(value, parts, vjp, "concat")

    def sum_of_squares(self, a: Node):
        va = a.value

        def vjp(g):
            return (2.0 * g * va,)

        return self._record(np.array(np.sum(va * va)), (a,), vjp, "sum_of_squares")

    def grad(self, loss: Node, wrt):
        """Backward pass from scalar `loss`; returns adjoints of `wrt` nodes.

        `wrt` is a mapping name -> leaf Node; the result maps the same names
        to gradient arrays (zeros if the leaf does not influence the loss).
        """
        if loss.value.ndim != 0:
            raise ValueError(
                f"grad: loss must be a scalar, got shape {loss.value.shape}"
            )
        adjoint = {loss.index: np.array(1.0)}
        for node in reversed(self._nodes[: loss.index + 1]):
            if node.vjp is None:
                continue  # leaf: keep its adjoint for collection below
            g = adjoint.pop(node.index, None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                acc = adjoint.get(parent.index)
                adjoint[parent.index] = pg if acc is None else acc + pg
        out = {}
        for name, node in wrt.items():
            g = adjoint.get(node.index)
            g = np.zeros_like(node.value) if g is None else np.asarray(g)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for '{name}'")
            out[name] = g
        return out
