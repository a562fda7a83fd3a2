"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds the computation graph directly on its output
tensor: a non-leaf tensor records its parent tensors and a local backward
rule.  ``backward`` walks the records reachable from a scalar loss in
reverse topological order, so each record fires exactly once and gradients
accumulate additively across fan-out (shared parameters see the sum of all
their uses).

All data is 64-bit: the test strategy of this package is built on central
finite differences, which need the headroom.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy float64 array plus an optional gradient and graph record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the graph only when it can matter."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _result(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain"
        )

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-C vector to every row of an R x C tensor."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"add_rowvec: shapes {x.data.shape} and {v.data.shape} incompatible"
        )

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if v.requires_grad:
            v._accumulate(g.sum(axis=0))

    return _result(x.data + v.data[None, :], (x, v), backward)


# ---------------------------------------------------------------------------
# nonlinearities

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-form) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accumulate(g * (cdf + x.data * pdf))

    return _result(x.data * cdf, (x,), backward)


def sin(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.cos(x.data))

    return _result(np.sin(x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out_data)

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then affine.

    Variance is the population variance; ``eps`` sits inside the square
    root so constant rows map to zero rather than dividing by zero.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm: expected 2-d input, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.data.shape}/{bias.data.shape} "
            f"do not match width {d}"
        )
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gxhat = g * gain.data[None, :]
            # d/dx of (x - mean) * inv_std with mean/var both functions of x
            dvar = (gxhat * centered).sum(axis=1, keepdims=True) * (-0.5) * inv_std**3
            dmean = -(gxhat.sum(axis=1, keepdims=True)) * inv_std
            dx = gxhat * inv_std + dvar * 2.0 * centered / d + dmean / d
            x._accumulate(dx)

    return _result(xhat * gain.data[None, :] + bias.data[None, :], (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape and indexing


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a V x D table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-d table, got {table.data.shape}")
    v = table.data.shape[0]
    bad = idx[(idx < 0) | (idx >= v)]
    if bad.size:
        raise IndexError(f"gather_rows: index {int(bad[0])} out of range [0, {v})")

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accumulate(acc)

    return _result(table.data[idx], (table,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(orig))

    return _result(x.data.reshape(shape), (x,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"concat_rows: shapes {a.data.shape} and {b.data.shape} incompatible"
        )
    ra = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:ra])
        if b.requires_grad:
            b._accumulate(g[ra:])

    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"slice_rows: expected 2-d input, got {x.data.shape}")

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[start:stop] = g
            x._accumulate(acc)

    return _result(x.data[start:stop].copy(), (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols: expected 2-d input, got {x.data.shape}")

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[:, start:stop] = g
            x._accumulate(acc)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of an R x C tensor (shape C result)."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows: expected 2-d input, got {x.data.shape}")
    r = x.data.shape[0]

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / r, x.data.shape))

    return _result(x.data.mean(axis=0), (x,), backward)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a logit vector against an integer label.

    Computed in log-sum-exp form; the backward rule is softmax(logits)
    minus the one-hot label.
    """
    z = logits.data.reshape(-1)
    n = z.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"cross_entropy: label {label} out of range [0, {n})")
    m = z.max()
    shifted = z - m
    lse = m + np.log(np.exp(shifted).sum())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum()
            p[label] -= 1.0
            logits._accumulate((float(g) * p).reshape(logits.data.shape))

    return _result(np.asarray(lse - z[label]), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    # iterative post-order DFS; the resulting list is the graph's operation
    # records in topological order
    graph: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            graph.append(node)
            continue
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(graph):
        node._backward(node.grad)


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function at ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may either use
    its argument or close over a structure containing ``x``.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_grad: step must be positive, got {step}")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    try:
        for i in range(flat_base.size):
            orig = flat_base[i]
            x.data.reshape(-1)[i] = orig + step
            with no_grad():
                f_plus = float(f(x).data)
            x.data.reshape(-1)[i] = orig - step
            with no_grad():
                f_minus = float(f(x).data)
            x.data.reshape(-1)[i] = orig
            flat_grad[i] = (f_plus - f_minus) / (2.0 * step)
    finally:
        x.data[...] = base
    return grad
