"""Training objective: cross-entropy, triplet embedding regularizer, L2."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .graph import CsrMatrix

PROB_CLAMP = 1e-12


class NoValidNegativeError(ValueError):
    pass


@dataclass(frozen=True)
class TripletBatch:
    centers: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if not (len(self.centers) == len(self.positives) == len(self.negatives)):
            raise ValueError("triplet arrays must have equal lengths")

    def __len__(self):
        return len(self.centers)


@dataclass(frozen=True)
class LossReport:
    j: float
    r: float
    l2: float
    l2_weight: float

    @property
    def total(self) -> float:
        return self.j + self.r + self.l2_weight * self.l2


def dis(z_i, z_j) -> float:
    """1 - sigmoid(z_i . z_j)."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape:
        raise ValueError(f"vectors differ in shape: {z_i.shape} vs {z_j.shape}")
    return float(expit(-np.dot(z_i, z_j)))  # 1 - sigmoid(x), without cancellation


def _dis_rows(Z: Tensor, a: np.ndarray, b: np.ndarray) -> Tensor:
    dots = ad.row_dot(ad.gather_rows(Z, a), ad.gather_rows(Z, b))
    return ad.sigmoid(ad.mul(dots, -1.0))


def triplet_regularizer(Z, batch: TripletBatch, beta: float) -> Tensor:
    """Mean over triplets of beta*Dis(c, p) - (1 - beta)*Dis(c, n)."""
    if len(batch) == 0:
        raise ValueError("triplet batch is empty")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    Z = ad.as_tensor(Z)
    pull = _dis_rows(Z, batch.centers, batch.positives)
    push = _dis_rows(Z, batch.centers, batch.negatives)
    return ad.mean(ad.sub(ad.mul(pull, beta), ad.mul(push, 1.0 - beta)))


def default_triplet_count(n_nodes: int, n_edges: int) -> int:
    return min(n_edges, 10 * n_nodes)


def sample_triplets(adj: CsrMatrix, rng: np.random.Generator, count: int) -> TripletBatch:
    """Draw ``count`` (center, positive, negative) triplets.

    ``adj`` is the adjacency without self-loops; every stored entry (c, p) is
    a candidate positive edge. Edges whose center is adjacent to every other
    node are never drawn. Negatives are drawn uniformly by rejection.
    """
    n = adj.n_rows
    if n < 3 or adj.nnz == 0:
        raise ValueError("triplet sampling needs at least 3 nodes and 1 edge")
    if count < 1:
        raise ValueError("count must be positive")
    centers_all = adj.row_indices()
    positives_all = adj.col_indices
    off_diag = centers_all != positives_all
    degree = np.bincount(centers_all[off_diag], minlength=n)
    usable = np.flatnonzero(off_diag & (degree[centers_all] < n - 1))
    if usable.size == 0:
        raise NoValidNegativeError("every edge's center is adjacent to all other nodes")

    replace = count > usable.size
    chosen = np.sort(rng.choice(usable.size, size=count, replace=replace))
    picked = usable[chosen]
    centers = centers_all[picked]
    positives = positives_all[picked]

    negatives = rng.integers(0, n, size=count)
    bad = (negatives == centers) | adj.has_entry(centers, negatives)
    while np.any(bad):
        idx = np.flatnonzero(bad)
        negatives[idx] = rng.integers(0, n, size=idx.size)
        bad[idx] = (negatives[idx] == centers[idx]) | adj.has_entry(centers[idx], negatives[idx])
    return TripletBatch(centers, positives, negatives)


def masked_cross_entropy(output, labels, mask, multi_label: bool = False) -> Tensor:
    """Mean cross-entropy over the nodes selected by ``mask``.

    Single-label: ``labels`` holds class indices and ``output`` row
    probabilities. Multi-label: ``labels`` is a 0/1 matrix and the loss is
    binary cross-entropy averaged over every (node, class) pair in the mask.
    """
    output = ad.as_tensor(output)
    nodes = np.flatnonzero(np.asarray(mask, dtype=bool))
    if nodes.size == 0:
        raise ValueError("mask selects no nodes")
    n_classes = output.shape[1]
    if multi_label:
        y = np.asarray(labels)[nodes].astype(output.dtype)
        if y.shape != (nodes.size, n_classes):
            raise ValueError("multi-label targets do not match the output shape")
        p = ad.gather_rows(output, nodes)
        ll = ad.add(ad.mul(ad.log(p, PROB_CLAMP), y),
                    ad.mul(ad.log(ad.sub(1.0, p), PROB_CLAMP), 1.0 - y))
        return ad.mul(ad.mean(ll), -1.0)
    y = np.asarray(labels, dtype=np.int64)[nodes]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    return ad.mul(ad.mean(ad.log(ad.pick(output, nodes, y), PROB_CLAMP)), -1.0)
