"""Tape-based reverse-mode differentiation over dense numpy arrays.

Only the operators the model needs are provided. Operations record onto the
innermost active :class:`Tape`; with no tape active they simply compute
values, which is how evaluation passes run.

    with Tape() as tape:
        loss = ad.sum(ad.matmul(x, w))
    grads = backward(tape, loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .graph import CsrMatrix, DimensionError


class TapeError(RuntimeError):
    pass


class ShapeError(DimensionError):
    pass


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    vjp: Callable


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense array that may carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if not any(p.requires_grad for p in parents):
        return out
    tape = active_tape()
    if tape is None:
        return out
    for p in parents:
        if p.tape is not None and p.tape is not tape:
            raise TapeError("operand was recorded on a different tape")
    out.requires_grad = True
    out.tape = tape
    out.node_id = len(tape.nodes)
    tape.nodes.append(_Node(out, tuple(parents), vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product; a row vector or scalar may broadcast over rows."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), vjp)


mul_elementwise = mul


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), vjp)


def _spmm(S: CsrMatrix, m: np.ndarray) -> np.ndarray:
    return _kernels.spmm(S.row_offsets, S.col_indices, S.values.astype(m.dtype, copy=False),
                         np.ascontiguousarray(m))


def spmm_const(S: CsrMatrix, m) -> Tensor:
    """Constant sparse matrix times a differentiable dense matrix."""
    m = as_tensor(m)
    if m.data.ndim != 2 or S.n_cols != m.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {S.shape} by {m.shape}")

    def vjp(g):
        return (_spmm(S.transpose(), g),)

    return _make(_spmm(S, m.data), (m,), vjp)


def spmm_values(pattern: CsrMatrix, values, m) -> Tensor:
    """Sparse matrix with differentiable stored values times a dense matrix."""
    values, m = as_tensor(values), as_tensor(m)
    if values.shape != (pattern.nnz,):
        raise ShapeError(f"spmm_values: expected {pattern.nnz} values, got {values.shape}")
    if m.data.ndim != 2 or pattern.n_cols != m.shape[0]:
        raise ShapeError(f"spmm_values: cannot multiply {pattern.shape} by {m.shape}")
    S = pattern.with_values(values.data)

    def vjp(g):
        g_vals = None
        if values.requires_grad:
            g_vals = _kernels.sddmm(pattern.row_offsets, pattern.col_indices,
                                    np.ascontiguousarray(g), np.ascontiguousarray(m.data))
        g_m = _spmm(S.transpose(), g) if m.requires_grad else None
        return g_vals, g_m

    return _make(_spmm(S, m.data), (values, m), vjp)


def edge_dot(a, b, pattern: CsrMatrix) -> Tensor:
    """Per stored entry (u, v) of ``pattern``: the dot product a[u] . b[v]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1] \
            or a.shape[0] != pattern.n_rows or b.shape[0] != pattern.n_cols:
        raise ShapeError(f"edge_dot: shapes {a.shape}, {b.shape} do not fit pattern {pattern.shape}")
    logits = _kernels.sddmm(pattern.row_offsets, pattern.col_indices,
                            np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))

    def vjp(g):
        G = pattern.with_values(g)
        return (_spmm(G, b.data) if a.requires_grad else None,
                _spmm(G.transpose(), a.data) if b.requires_grad else None)

    return _make(logits, (a, b), vjp)


# -- nonlinearities ----------------------------------------------------------

def elu(x) -> Tensor:
    """ELU with alpha = 1."""
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0)))

    def vjp(g):
        return (g * np.where(pos, 1.0, out + 1.0),)

    return _make(out, (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("row_softmax expects a matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _make(out, (x,), vjp)


def edge_softmax(logits, pattern: CsrMatrix) -> Tensor:
    """Softmax of per-entry logits over each row of ``pattern``."""
    logits = as_tensor(logits)
    if logits.shape != (pattern.nnz,):
        raise ShapeError(f"edge_softmax: expected {pattern.nnz} logits, got {logits.shape}")
    if np.any(np.diff(pattern.row_offsets) == 0):
        raise ShapeError("edge_softmax: pattern has an empty row")
    probs = _kernels.segment_softmax(pattern.row_offsets, np.ascontiguousarray(logits.data))

    def vjp(g):
        return (_kernels.segment_softmax_vjp(pattern.row_offsets, probs, np.ascontiguousarray(g)),)

    return _make(probs, (logits,), vjp)


def masked_row_softmax_sparse(logits, pattern: CsrMatrix) -> tuple[Tensor, CsrMatrix]:
    """Row softmax restricted to ``pattern``; returns the values and the matrix."""
    probs = edge_softmax(logits, pattern)
    return probs, pattern.with_values(probs.data)


def log(x, clamp: float = 1e-12) -> Tensor:
    """Natural log with inputs clamped from below at ``clamp``."""
    x = as_tensor(x)
    safe = np.maximum(x.data, clamp)

    def vjp(g):
        return (np.where(x.data > clamp, g / safe, 0.0),)

    return _make(np.log(safe), (x,), vjp)


def dropout(x, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    scale = scale.astype(x.dtype)

    def vjp(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), vjp)


# -- structure ---------------------------------------------------------------

def concat_cols(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = tensors[0].shape[0]
    if any(t.data.ndim != 2 or t.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols: all inputs must be matrices with equal row counts")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, vjp)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), vjp)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), vjp)


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), vjp)


def pick(x, rows, cols) -> Tensor:
    """x[rows[k], cols[k]] for every k."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(x.data[rows, cols], (x,), vjp)


def row_dot(a, b) -> Tensor:
    """Dot product of matching rows, shape (k,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_dot: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        g = g[:, None]
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(np.einsum("ij,ij->i", a.data, b.data), (a, b), vjp)


def row_sum(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=1, keepdims=True), (x,), vjp)


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def vjp(g):
        return (np.full_like(x.data, g),)

    return _make(np.asarray(x.data.sum()), (x,), vjp)


def mean(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("mean of an empty tensor")

    def vjp(g):
        return (np.full_like(x.data, g / x.data.size),)

    return _make(np.asarray(x.data.mean()), (x,), vjp)


def l2_norm_sq(params: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries over all given tensors."""
    params = [as_tensor(p) for p in params]
    total = np.asarray(np.add.reduce([np.sum(p.data * p.data) for p in params])) if params \
        else np.asarray(0.0)

    def vjp(g):
        return tuple(2.0 * g * p.data if p.requires_grad else None for p in params)

    return _make(total, params, vjp)


# -- backward ------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    Returns a mapping from every leaf tensor that received gradient (plus any
    tensors listed in ``params``, which get zeros when untouched) to its
    gradient; each leaf's ``.grad`` is set as well.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not None and loss.tape is not tape:
        raise TapeError("loss was recorded on a different tape")
    for p in params:
        if p.tape is not None and p.tape is not tape:
            raise TapeError("parameter belongs to a different tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent.is_leaf:
                leaves[key] = parent
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg).reshape(parent.shape)

    grads: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        grads[t] = pending[key]
    for p in params:
        if p not in grads:
            grads[p] = np.zeros_like(p.data)
    for t, g in grads.items():
        t.grad = g
    return grads
