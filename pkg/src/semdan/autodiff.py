"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Every tensor carries a monotonically increasing node id.  Because an
operation's output is always created after its inputs, ordering the
reachable nodes by id gives a valid topological tape; ``backward`` walks
that tape in reverse, visiting each node exactly once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "parents", "op", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return add(self, neg(_wrap(other)))
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _result(values: np.ndarray, op: str, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that take part in differentiation, in recording order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Interior gradients live only for the duration of the call; leaves keep
    accumulating across calls until ``zero_grad``.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = tape(loss)
    upstream: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for node in reversed(nodes):
        g = upstream.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in upstream:
                upstream[parent.node_id] = upstream[parent.node_id] + pg
            else:
                upstream[parent.node_id] = pg


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _result(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1xN row broadcast over a's rows, or 1x1."""
    if a.shape == b.shape:
        return _result(a.values + b.values, "add", (a, b), lambda g: (g, g))
    if b.shape == (1, a.shape[1]) or b.shape == (1, 1):
        keep = b.shape
        return _result(a.values + b.values, "add", (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True) if keep[1] > 1 else g.sum().reshape(1, 1)))
    if a.shape == (1, 1):
        return add(b, a)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes, or tensor times 1x1 scalar."""
    av, bv = a.values, b.values
    if a.shape == b.shape:
        return _result(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))
    if b.shape == (1, 1):
        return _result(av * bv, "mul", (a, b),
                       lambda g: (g * bv, np.sum(g * av).reshape(1, 1)))
    if a.shape == (1, 1):
        return mul(b, a)
    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def neg(x: Tensor) -> Tensor:
    return _result(-x.values, "neg", (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    # np.maximum keeps NaN visible so the trainer's abort policy can see it
    return _result(np.maximum(x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    v = x.values
    bad = np.argwhere(~(v > 0))
    if bad.size:
        i, j = bad[0]
        raise DomainError(f"log of non-positive entry {v[i, j]!r} at index ({i}, {j})")
    return _result(np.log(v), "log", (x,), lambda g: (g / v,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)
    return _result(e, "exp", (x,), lambda g: (g * e,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.values > floor
    return _result(np.where(mask, x.values, floor), "clamp_min", (x,), lambda g: (g * mask,))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp, "neg": neg}


def elementwise(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(x)


def softmax_rows(x: Tensor) -> Tensor:
    v = x.values
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax_rows received non-finite input")
    z = np.exp(v - v.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _result(s, "softmax_rows", (x,), back)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row counts differ: {a.shape} vs {b.shape}")
    split = a.shape[1]
    return _result(np.concatenate([a.values, b.values], axis=1), "concat_cols", (a, b),
                   lambda g: (g[:, :split], g[:, split:]))


def row_l2_norm(x: Tensor) -> Tensor:
    v = x.values
    n = np.sqrt(np.sum(v * v, axis=1, keepdims=True))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, v / safe, 0.0) * g,)

    return _result(n, "row_l2_norm", (x,), back)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    if s.shape != (x.shape[0], 1):
        raise ShapeError(f"row_scale needs scale of shape ({x.shape[0]}, 1), got {s.shape}")
    xv, sv = x.values, s.values
    return _result(xv * sv, "row_scale", (x, s),
                   lambda g: (g * sv, np.sum(g * xv, axis=1, keepdims=True)))


def reciprocal(x: Tensor) -> Tensor:
    v = x.values
    if np.any(v == 0):
        raise DomainError("reciprocal of zero")
    return _result(1.0 / v, "reciprocal", (x,), lambda g: (-g / (v * v),))


def detach(x: Tensor) -> Tensor:
    out = Tensor(x.values)
    out.op = "detach"
    return out


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return _result(x.values, "grad_reverse", (x,), lambda g: (-lam * g,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.sum(x.values).reshape(1, 1), "sum", (x,),
                   lambda g: (np.full(x.shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    return _result(np.mean(x.values).reshape(1, 1), "mean", (x,),
                   lambda g: (np.full(x.shape, g[0, 0] / n),))


def gather_rows(x: Tensor, cols: np.ndarray) -> Tensor:
    """Pick x[i, cols[i]] for each row, returning a b x 1 column."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros(x.shape)
        out[rows, cols] = g[:, 0]
        return (out,)

    return _result(x.values[rows, cols].reshape(-1, 1), "gather_rows", (x,), back)


def outer_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise flattened outer product: out[i] = vec(a_i b_i^T), width da*db."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"outer_rows row counts differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    n, da, db = a.shape[0], a.shape[1], b.shape[1]
    out = (av[:, :, None] * bv[:, None, :]).reshape(n, da * db)

    def back(g):
        g3 = g.reshape(n, da, db)
        return (np.einsum("nij,nj->ni", g3, bv), np.einsum("nij,ni->nj", g3, av))

    return _result(out, "outer_rows", (a, b), back)
