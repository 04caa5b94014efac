"""Dense float64 matrices and a small reverse-mode differentiation tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major,
C order). The tape records every operation in execution order, so the node
list is already topologically sorted and ``backward`` is a single reverse sweep.

ReLU uses subgradient 0 at 0. There is no broadcasting: binary operations
require identical shapes.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, LabelIndexError, ShapeError

GradFn = Callable[[np.ndarray], np.ndarray]


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 2-D array (scalars become 1x1)."""
    m = np.array(x, dtype=np.float64, order="C", copy=True)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def seeded_gaussian(rows: int, cols: int, mean: float = 0.0, std: float = 1.0,
                    seed: int = 0) -> np.ndarray:
    """Reproducible draw from N(mean, std^2) of shape (rows, cols)."""
    if std < 0:
        raise ContractError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    rng = np.random.default_rng(seed)
    return mean + std * rng.standard_normal((rows, cols))


def _check_same(op: str, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: operand shapes differ, {x.shape} vs {y.shape}")


class Node:
    __slots__ = ("value", "grad", "parents", "name", "requires_grad")

    def __init__(self, value: np.ndarray, parents=(), name: Optional[str] = None,
                 requires_grad: bool = False):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        # (parent node, vector-Jacobian product) pairs, only for parents needing grads
        self.parents: tuple = parents
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}{self.value.shape}"


class Tape:
    """Records operations on :class:`Node` values for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves -------------------------------------------------------------

    def param(self, value, name: str) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        node = Node(np.asarray(value, dtype=np.float64), name=name, requires_grad=True)
        self.nodes.append(node)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        node = Node(np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    def _push(self, value: np.ndarray, links: Sequence[tuple[Node, GradFn]]) -> Node:
        live = tuple((p, fn) for p, fn in links if p.requires_grad)
        node = Node(value, live, requires_grad=bool(live))
        self.nodes.append(node)
        return node

    # -- operations ---------------------------------------------------------

    def matmul(self, x: Node, y: Node) -> Node:
        xv, yv = x.value, y.value
        if xv.shape[1] != yv.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {xv.shape} by {yv.shape}")
        return self._push(xv @ yv, ((x, lambda g: g @ yv.T), (y, lambda g: xv.T @ g)))

    def elementwise(self, op: str, x: Node, y: Optional[Node] = None) -> Node:
        xv = x.value
        if op in ("add", "sub", "mul"):
            if y is None:
                raise ContractError(f"{op} needs two operands")
            yv = y.value
            _check_same(op, xv, yv)
            if op == "add":
                return self._push(xv + yv, ((x, lambda g: g), (y, lambda g: g)))
            if op == "sub":
                return self._push(xv - yv, ((x, lambda g: g), (y, lambda g: -g)))
            return self._push(xv * yv, ((x, lambda g: g * yv), (y, lambda g: g * xv)))
        if y is not None:
            raise ContractError(f"{op} is unary")
        if op == "relu":
            mask = xv > 0
            return self._push(np.where(mask, xv, 0.0), ((x, lambda g: g * mask),))
        if op == "tanh":
            out = np.tanh(xv)
            return self._push(out, ((x, lambda g: g * (1.0 - out * out)),))
        raise ContractError(f"unknown elementwise op {op!r}")

    def add(self, x: Node, y: Node) -> Node:
        return self.elementwise("add", x, y)

    def sub(self, x: Node, y: Node) -> Node:
        return self.elementwise("sub", x, y)

    def mul(self, x: Node, y: Node) -> Node:
        return self.elementwise("mul", x, y)

    def activation(self, kind: str, x: Node) -> Node:
        if kind == "identity":
            return x
        return self.elementwise(kind, x)

    def transpose(self, x: Node) -> Node:
        return self._push(x.value.T.copy(), ((x, lambda g: g.T),))

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._push(c * x.value, ((x, lambda g: c * g),))

    def total(self, x: Node) -> Node:
        """Sum of all entries as a 1x1 node."""
        shape = x.value.shape
        return self._push(np.array([[x.value.sum()]]),
                          ((x, lambda g: np.full(shape, g[0, 0])),))

    def inner(self, x: Node, y: Node) -> Node:
        """Frobenius inner product <x, y> as a 1x1 node."""
        xv, yv = x.value, y.value
        _check_same("inner", xv, yv)
        return self._push(np.array([[np.sum(xv * yv)]]),
                          ((x, lambda g: g[0, 0] * yv), (y, lambda g: g[0, 0] * xv)))

    def add_scalars(self, terms: Sequence[Node]) -> Node:
        """Sum of 1x1 nodes, accumulated left to right."""
        if not terms:
            return self.constant(np.zeros((1, 1)))
        acc = terms[0]
        for t in terms[1:]:
            acc = self.add(acc, t)
        return acc

    def softmax_cross_entropy(self, logits: Node, labels, reduction: str = "mean") -> Node:
        """Cross-entropy of integer ``labels`` under softmax(``logits``).

        ``reduction="mean"`` averages over the batch, ``"sum"`` adds per-sample
        losses (used when per-sample gradients must be read off exactly).
        """
        z = logits.value
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        batch, classes = z.shape
        if labels.shape[0] != batch:
            raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise LabelIndexError(f"label out of range for {classes} classes")
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsum
        rows = np.arange(batch)
        nll = -logp[rows, labels]
        denom = float(batch) if reduction == "mean" else 1.0
        if reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {reduction!r}")
        value = np.array([[nll.sum() / denom]])

        def grad(g):
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            return p * (g[0, 0] / denom)

        return self._push(value, ((logits, grad),))

    # -- differentiation ----------------------------------------------------

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Populate ``.grad`` on every node reachable from ``root``.

        Returns a gradient for every registered parameter (zeros when the
        parameter does not influence ``root``).
        """
        if root.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, fn in node.parents:
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        return {name: (n.grad if n.grad is not None else np.zeros_like(n.value))
                for name, n in self.params.items()}


def matmul(x, y) -> np.ndarray:
    """Tape-free matrix product with the same shape contract as ``Tape.matmul``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {y.shape}")
    return x @ y


def elementwise(op: str, x, y=None) -> np.ndarray:
    """Tape-free counterpart of ``Tape.elementwise``."""
    tape = Tape()
    xn = tape.constant(np.asarray(x, dtype=np.float64))
    yn = None if y is None else tape.constant(np.asarray(y, dtype=np.float64))
    return tape.elementwise(op, xn, yn).value


def softmax_cross_entropy(logits, labels) -> float:
    tape = Tape()
    return float(tape.softmax_cross_entropy(tape.constant(as_matrix(logits)), labels).value[0, 0])
