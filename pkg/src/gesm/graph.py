"""Sparse graph storage and random-walk operators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix in canonical form.

    Column indices are strictly increasing within each row. Instances are
    treated as immutable; ``with_values`` shares the sparsity pattern (and
    its cached transpose permutation) with the original.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _pattern_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        cols = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        vals = np.ascontiguousarray(self.values)
        if offsets.shape != (self.n_rows + 1,):
            raise DimensionError("row_offsets must have length n_rows + 1")
        if vals.shape != cols.shape:
            raise DimensionError("values and col_indices differ in length")
        if offsets[0] != 0 or offsets[-1] != cols.shape[0] or np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing from 0 to nnz")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("column index out of range")
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> CsrMatrix:
        """Build a canonical matrix; duplicate coordinates are summed."""
        n_rows, n_cols = shape
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values)
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("column index out of range")
        key = rows * n_cols + cols
        order = np.argsort(key, kind="stable")
        key = key[order]
        values = values[order]
        uniq, start = np.unique(key, return_index=True)
        if uniq.size != key.size:
            values = np.add.reduceat(values, start) if values.size else values
        r = uniq // max(n_cols, 1)
        c = uniq - r * n_cols
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(offsets, r + 1, 1)
        return cls(n_rows, n_cols, np.cumsum(offsets), c, values)

    @classmethod
    def from_dense(cls, dense) -> CsrMatrix:
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> CsrMatrix:
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n, dtype=dtype))

    # -- accessors ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.row_indices(), self.col_indices] = self.values
        return out

    def with_values(self, values) -> CsrMatrix:
        out = CsrMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices,
                        np.asarray(values), self._pattern_cache)
        return out

    def astype(self, dtype) -> CsrMatrix:
        return self.with_values(self.values.astype(dtype, copy=False))

    def _transpose_pattern(self):
        cached = self._pattern_cache.get("t")
        if cached is None:
            cached = _kernels.transpose_pattern(self.n_rows, self.n_cols,
                                                self.row_offsets, self.col_indices)
            self._pattern_cache["t"] = cached
        return cached

    def transpose(self) -> CsrMatrix:
        t_offsets, t_cols, perm = self._transpose_pattern()
        return CsrMatrix(self.n_cols, self.n_rows, t_offsets, t_cols, self.values[perm])

    @property
    def T(self) -> CsrMatrix:
        return self.transpose()

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.col_indices, weights=self.values, minlength=self.n_cols)

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.n_rows, dtype=np.float64)
        np.add.at(out, self.row_indices(), self.values)
        return out

    def has_entry(self, rows, cols) -> np.ndarray:
        """Vectorized membership test for (row, col) pairs."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        keys = self._pattern_cache.get("keys")
        if keys is None:
            keys = self.row_indices() * self.n_cols + self.col_indices
            self._pattern_cache["keys"] = keys
        probe = rows * self.n_cols + cols
        if keys.size == 0:
            return np.zeros(probe.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, probe), keys.size - 1)
        return keys[pos] == probe

    def same_pattern(self, other: CsrMatrix) -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices))

    def __matmul__(self, other):
        return spmm(self, other)


@dataclass(frozen=True)
class WalkDistribution:
    values: np.ndarray
    step: int = 0

    @property
    def mass(self) -> float:
        return float(np.sum(self.values))


def add_self_loops(adj: CsrMatrix) -> CsrMatrix:
    """Return A + I for a binary adjacency; existing diagonal entries stay 1."""
    if adj.n_rows != adj.n_cols:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    n = adj.n_rows
    rows = adj.row_indices()
    off_diag = rows != adj.col_indices
    diag = np.arange(n, dtype=np.int64)
    r = np.concatenate([rows[off_diag], diag])
    c = np.concatenate([adj.col_indices[off_diag], diag])
    v = np.concatenate([adj.values[off_diag], np.ones(n, dtype=adj.values.dtype)])
    return CsrMatrix.from_coo(r, c, v, adj.shape)


def column_normalize(adj_tilde: CsrMatrix, dtype=np.float64) -> CsrMatrix:
    """Divide every column by its sum, giving a column-stochastic matrix."""
    deg = adj_tilde.column_sums()
    if np.any(deg == 0):
        bad = int(np.flatnonzero(deg == 0)[0])
        raise NormalizationError(f"column {bad} has no entries to normalize")
    values = adj_tilde.values.astype(dtype) / deg[adj_tilde.col_indices].astype(dtype)
    return adj_tilde.with_values(values)


def transition_matrix(adj: CsrMatrix, self_loops: bool = True, dtype=np.float64) -> CsrMatrix:
    """Random-walk transition matrix ``A D^-1``.

    With ``self_loops`` (the default, used by the model) the degrees are those
    of ``A + I``; without, the bare adjacency is normalized and every node
    must have at least one neighbor.
    """
    base = add_self_loops(adj) if self_loops else adj
    return column_normalize(base, dtype=dtype)


def walk_step(P: CsrMatrix, u: WalkDistribution) -> WalkDistribution:
    values = np.asarray(u.values, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != P.n_cols or P.n_rows != P.n_cols:
        raise DimensionError(f"cannot apply {P.shape} transition to vector of length {values.shape}")
    nxt = _kernels.spmm(P.row_offsets, P.col_indices, P.values.astype(np.float64),
                        values[:, None])[:, 0]
    return WalkDistribution(nxt, u.step + 1)


def walk(P: CsrMatrix, u: WalkDistribution, steps: int) -> WalkDistribution:
    for _ in range(steps):
        u = walk_step(P, u)
    return u


def spmm(S: CsrMatrix, M) -> np.ndarray:
    """Sparse times dense, each output row summed in ascending column order."""
    M = np.asarray(M)
    squeeze = M.ndim == 1
    if squeeze:
        M = M[:, None]
    if M.ndim != 2 or M.shape[0] != S.n_cols:
        raise DimensionError(f"cannot multiply {S.shape} by {M.shape}")
    dtype = np.result_type(S.values.dtype, M.dtype, np.float32)
    out = _kernels.spmm(S.row_offsets, S.col_indices, S.values.astype(dtype, copy=False),
                        np.ascontiguousarray(M, dtype=dtype))
    return out[:, 0] if squeeze else out
