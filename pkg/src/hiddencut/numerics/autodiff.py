"""Tape-style reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` records its parents and a closure mapping the upstream
gradient to one gradient per parent. Nodes built only from constants carry
no tape at all, so evaluation-mode forward passes cost nothing extra.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from . import kernels
from .dense import log_softmax_rows

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn: BackwardFn | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str | None = None) -> Node:
    """Leaf whose gradient is accumulated by :func:`backward`."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents, backward_fn) -> Node:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True)
    return Node(value)


def backward(root: Node, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every tracked node.

    Each node's backward closure runs exactly once, in reverse topological
    order.
    """
    if not root.requires_grad:
        return
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                p.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def where(keep: np.ndarray, a: Node) -> Node:
    """Zero the entries of ``a`` where ``keep`` is false; gradient likewise."""
    keep = np.asarray(keep, dtype=bool)
    return _make(np.where(keep, a.value, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),))


# -- shape ------------------------------------------------------------------

def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Node, index) -> Node:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.value[index], (a,), bw)


def embedding(table: Node, ids: np.ndarray) -> Node:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.value[ids], (table,), bw)


# -- reductions -------------------------------------------------------------

def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def sum_last(a: Node) -> Node:
    return _make(a.value.sum(axis=-1), (a,),
                 lambda g: (np.broadcast_to(g[..., None], a.shape),))


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                k, n = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _make(np.matmul(av, bv), (a, b), bw)


# -- nonlinearities ---------------------------------------------------------

def gelu(a: Node) -> Node:
    k = kernels.active
    x = a.value
    y, t = k.gelu_forward(x)
    return _make(y, (a,), lambda g: (k.gelu_backward(g, x, t),))


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    k = kernels.active
    y, xhat, rstd = k.layer_norm_forward(x.value, gain.value, bias.value, eps)
    gv = gain.value
    return _make(y, (x, gain, bias), lambda g: k.layer_norm_backward(g, xhat, rstd, gv))


def masked_softmax(x: Node, valid: np.ndarray) -> Node:
    """Softmax over the last axis; entries where ``valid`` is false are 0."""
    k = kernels.active
    y = k.masked_softmax_forward(x.value, valid)
    return _make(y, (x,), lambda g: (k.masked_softmax_backward(g, y),))


def log_softmax(x: Node) -> Node:
    v = x.value
    out = log_softmax_rows(v)
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def pick(x: Node, index: np.ndarray) -> Node:
    """``x[r, index[r]]`` for each row ``r`` of a 2-D node."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _make(x.value[rows, index], (x,), bw)
