"""Compiled CSR kernels.

Every kernel walks a row's stored entries in storage order, which is
ascending column order for canonical matrices, so results do not depend on
scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def spmm(indptr, indices, data, m):
    n_rows = indptr.shape[0] - 1
    k = m.shape[1]
    out = np.zeros((n_rows, k), dtype=m.dtype)
    for i in range(n_rows):
        for p in range(indptr[i], indptr[i + 1]):
            v = data[p]
            j = indices[p]
            for c in range(k):
                out[i, c] += v * m[j, c]
    return out


@njit(cache=True)
def sddmm(indptr, indices, a, b):
    """out[p] = <a[row(p)], b[col(p)]> for every stored entry p."""
    n_rows = indptr.shape[0] - 1
    k = a.shape[1]
    out = np.zeros(indices.shape[0], dtype=a.dtype)
    for i in range(n_rows):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            acc = 0.0
            for c in range(k):
                acc += a[i, c] * b[j, c]
            out[p] = acc
    return out


@njit(cache=True)
def segment_softmax(indptr, logits):
    out = np.empty_like(logits)
    n_rows = indptr.shape[0] - 1
    for i in range(n_rows):
        lo = indptr[i]
        hi = indptr[i + 1]
        if hi == lo:
            continue
        mx = logits[lo]
        for p in range(lo + 1, hi):
            if logits[p] > mx:
                mx = logits[p]
        total = 0.0
        for p in range(lo, hi):
            e = np.exp(logits[p] - mx)
            out[p] = e
            total += e
        for p in range(lo, hi):
            out[p] /= total
    return out


@njit(cache=True)
def segment_softmax_vjp(indptr, probs, grad):
    # d logits = p * (g - sum_row(p * g))
    out = np.empty_like(probs)
    n_rows = indptr.shape[0] - 1
    for i in range(n_rows):
        lo = indptr[i]
        hi = indptr[i + 1]
        dot = 0.0
        for p in range(lo, hi):
            dot += probs[p] * grad[p]
        for p in range(lo, hi):
            out[p] = probs[p] * (grad[p] - dot)
    return out


@njit(cache=True)
def transpose_pattern(n_rows, n_cols, indptr, indices):
    """Return (t_indptr, t_indices, perm) with t_values = values[perm]."""
    nnz = indices.shape[0]
    counts = np.zeros(n_cols + 1, dtype=np.int64)
    for p in range(nnz):
        counts[indices[p] + 1] += 1
    for j in range(n_cols):
        counts[j + 1] += counts[j]
    t_indptr = counts.copy()
    fill = counts[:-1].copy()
    t_indices = np.empty(nnz, dtype=np.int64)
    perm = np.empty(nnz, dtype=np.int64)
    # rows visited in ascending order keep each transposed row sorted
    for i in range(n_rows):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            q = fill[j]
            t_indices[q] = i
            perm[q] = p
            fill[j] += 1
    return t_indptr, t_indices, perm
