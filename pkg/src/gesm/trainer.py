"""Training protocol: loss assembly, Adam, early stopping, metrics, seed sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .data import GraphDataset, SplitSpec, apply_split
from .graph import CsrMatrix, transition_matrix
from .losses import LossReport, default_triplet_count, masked_cross_entropy, sample_triplets, \
    triplet_regularizer
from .model import EVAL, TRACE_POOLING, TRAIN, VARIANTS, GesmParams, GesmVariant, forward, \
    init_params
from .optim import AdamState, NonFiniteGradientError, adam_step

log = logging.getLogger(__name__)

SINGLE_LABEL = "single-label"
MULTI_LABEL = "multi-label"

# feature matrices sparser than this are multiplied as CSR
SPARSE_FEATURE_DENSITY = 0.25


@dataclass(frozen=True)
class GesmConfig:
    hidden: int = 64
    steps: int = 15
    heads: int = 8
    dropout: float = 0.7
    l2: float = 0.0005
    beta: float = 0.5
    lr: float = 0.003
    max_epochs: int = 300
    patience: int = 100
    seed: int = 0
    variant: GesmVariant = VARIANTS["full"]
    task: str = SINGLE_LABEL
    triplet_count: int = 0  # 0 -> min(|E|, 10 n)
    resample_triplets: bool = True
    pooling: str = TRACE_POOLING
    dtype: str = "float64"
    debug: bool = False

    def __post_init__(self):
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", GesmVariant.from_name(self.variant))
        self.validate()

    def validate(self) -> None:
        if self.variant.use_attention and (self.heads < 1 or self.hidden % self.heads):
            raise ValueError(f"hidden={self.hidden} must be divisible by heads={self.heads}")
        if self.hidden < 1 or self.steps < 0:
            raise ValueError("hidden must be >= 1 and steps >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.lr <= 0 or self.patience < 1 or self.max_epochs < 1 or self.l2 < 0:
            raise ValueError("need lr > 0, l2 >= 0, patience >= 1 and max_epochs >= 1")
        if self.task not in (SINGLE_LABEL, MULTI_LABEL):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def multi_label(self) -> bool:
        return self.task == MULTI_LABEL

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes) -> GesmConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Mapping[str, str]) -> GesmConfig:
        """Apply string-valued ``key=value`` overrides, coercing to field types."""
        return self.replace(**{k: _coerce(self, k, v) for k, v in overrides.items()})

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.name
        return out

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_file(cls, path, base: GesmConfig | None = None) -> GesmConfig:
        return (base or cls()).with_overrides(parse_kv(Path(path).read_text()))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(GesmConfig)}


def _coerce(config: GesmConfig, key: str, value):
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    current = getattr(config, key)
    if key == "variant":
        return GesmVariant.from_name(value)
    if isinstance(current, bool):
        lowered = value.strip().lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return lowered in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value.strip()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# Resolved choices from the published hyperparameter sets; see README.
PRESETS: dict[str, GesmConfig] = {
    "cora-public": GesmConfig(hidden=64, steps=15, l2=0.003, beta=0.5, lr=0.003, patience=20),
    "citeseer-public": GesmConfig(hidden=64, steps=5, l2=0.003, beta=0.5, lr=0.003, patience=100),
    "pubmed-public": GesmConfig(hidden=64, steps=15, l2=0.0005, beta=0.5, lr=0.003, patience=100),
    "cora-low": GesmConfig(hidden=64, steps=15, l2=0.003, beta=0.5, lr=0.003, patience=20),
    "citeseer-low": GesmConfig(hidden=64, steps=15, l2=0.003, beta=0.5, lr=0.003, patience=100),
    "pubmed-low": GesmConfig(hidden=64, steps=15, l2=0.0005, beta=0.5, lr=0.003, patience=100),
    "ppi": GesmConfig(hidden=256, steps=3, heads=8, dropout=0.0, l2=0.0, beta=1.0, lr=0.008,
                      max_epochs=3000, patience=100, task=MULTI_LABEL),
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, purpose) pair."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# -- metrics ---------------------------------------------------------------------------

def accuracy(output: np.ndarray, labels: np.ndarray, mask) -> float:
    nodes = np.flatnonzero(mask)
    if nodes.size == 0:
        raise ValueError("mask selects no nodes")
    return float(np.mean(output[nodes].argmax(axis=1) == labels[nodes]))


def f1_counts(output: np.ndarray, labels: np.ndarray, mask, threshold: float = 0.5):
    nodes = np.flatnonzero(mask)
    pred = output[nodes] > threshold
    truth = labels[nodes].astype(bool)
    return (int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth)))


def micro_f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def micro_f1(output: np.ndarray, labels: np.ndarray, mask, threshold: float = 0.5) -> float:
    if not np.any(mask):
        raise ValueError("mask selects no nodes")
    return micro_f1_from_counts(*f1_counts(output, labels, mask, threshold))


# -- prepared inputs ---------------------------------------------------------------

class PreparedGraph:
    """Model-ready view of a dataset: typed features, transition matrix, adjacency."""

    def __init__(self, ds: GraphDataset, dtype=np.float64):
        self.ds = ds
        dense = ds.features.astype(dtype)
        density = np.count_nonzero(dense) / max(dense.size, 1)
        self.X = CsrMatrix.from_dense(dense) if density < SPARSE_FEATURE_DENSITY else dense
        self.adj = ds.adjacency()
        self.A_hat = transition_matrix(self.adj, dtype=dtype)
        self.labels = ds.labels


def _forward(pg: PreparedGraph, params, config: GesmConfig, mode=EVAL, rng=None):
    return forward(pg.X, pg.A_hat, params, config.variant, mode, dropout=config.dropout,
                   rng=rng, multi_label=config.multi_label, pooling=config.pooling)


def evaluate(ds: GraphDataset | PreparedGraph, params: GesmParams, config: GesmConfig, mask) -> float:
    """Accuracy (single-label) or micro-F1 at threshold 0.5 (multi-label) over ``mask``."""
    if not params.all_finite():
        raise ValueError("parameters contain non-finite values")
    pg = ds if isinstance(ds, PreparedGraph) else PreparedGraph(ds, config.np_dtype)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no nodes")
    out = _forward(pg, params, config).output.data
    if config.multi_label:
        return micro_f1(out, pg.labels, mask)
    return accuracy(out, pg.labels, mask)


# -- reports -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    j: float
    r: float
    l2: float
    val_loss: float
    val_metric: float
    train_metric: float


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_metric: float = float("nan")
    best_val_loss: float = float("nan")
    train_metric: float = float("nan")
    val_metric: float = float("nan")
    test_metric: float = float("nan")
    wall_time_per_eval: list[float] = field(default_factory=list)
    status: str = "ok"
    params: GesmParams | None = field(default=None, repr=False, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def summary(self) -> dict:
        return {"type": "summary", "seed": self.seed, "status": self.status,
                "epochs_run": self.epochs_run, "best_epoch": self.best_epoch,
                "best_val_metric": self.best_val_metric, "best_val_loss": self.best_val_loss,
                "train_metric": self.train_metric, "val_metric": self.val_metric,
                "test_metric": self.test_metric, "config": self.config}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "epoch", "epoch": r.epoch, "train_loss": r.train_loss,
                             "val_loss": r.val_loss, "val_metric": r.val_metric,
                             "train_metric": r.train_metric, "j": r.j, "r": r.r, "l2": r.l2})
                 for r in self.epochs]
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"


# -- training --------------------------------------------------------------------

@dataclass
class _Split:
    graph: PreparedGraph
    mask: np.ndarray


def _loss_value(output: np.ndarray, labels, mask, multi_label: bool) -> tuple[float, int]:
    """(sum of per-item losses, item count) so losses pool across graphs."""
    loss = masked_cross_entropy(output, labels, mask, multi_label).item()
    nodes = int(np.count_nonzero(mask))
    count = nodes * output.shape[1] if multi_label else nodes
    return loss * count, count


def _pooled_metric(parts, multi_label: bool) -> float:
    if multi_label:
        tp = sum(p[0] for p in parts)
        fp = sum(p[1] for p in parts)
        fn = sum(p[2] for p in parts)
        return micro_f1_from_counts(tp, fp, fn)
    correct = sum(p[0] for p in parts)
    total = sum(p[1] for p in parts)
    return correct / total


def _metric_parts(output, labels, mask, multi_label):
    if multi_label:
        return f1_counts(output, labels, mask)
    nodes = np.flatnonzero(mask)
    return int(np.sum(output[nodes].argmax(axis=1) == labels[nodes])), nodes.size


def _evaluate_splits(splits: Sequence[_Split], params, config, cache) -> tuple[float, float]:
    parts, loss_sum, count = [], 0.0, 0
    for sp in splits:
        key = id(sp.graph)
        if key not in cache:
            t0 = time.perf_counter()
            cache[key] = _forward(sp.graph, params, config).output.data
            cache.setdefault("_times", []).append(1000.0 * (time.perf_counter() - t0))
        out = cache[key]
        s, c = _loss_value(out, sp.graph.labels, sp.mask, config.multi_label)
        loss_sum += s
        count += c
        parts.append(_metric_parts(out, sp.graph.labels, sp.mask, config.multi_label))
    return loss_sum / count, _pooled_metric(parts, config.multi_label)


def _fit(train_splits: Sequence[_Split], val_splits: Sequence[_Split], test_splits: Sequence[_Split],
         config: GesmConfig, n_features: int, n_classes: int,
         callback: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    config.validate()
    seed = config.seed
    init_rng = substream(seed, "init")
    dropout_rng = substream(seed, "dropout")
    triplet_rng = substream(seed, "triplets")
    dtype = config.np_dtype

    params = init_params(n_features, n_classes, config.hidden, config.steps, config.variant,
                         init_rng, heads=config.heads, dtype=dtype)
    tensors = params.tensors()
    opt = AdamState.for_params(tensors, lr=config.lr)
    report = TrainReport(seed=seed, config=config.to_dict())

    frozen_batches = {}

    def triplets_for(pg: PreparedGraph):
        if not config.resample_triplets and id(pg) in frozen_batches:
            return frozen_batches[id(pg)]
        count = config.triplet_count or default_triplet_count(pg.adj.n_rows, pg.adj.nnz)
        batch = sample_triplets(pg.adj, triplet_rng, count)
        frozen_batches[id(pg)] = batch
        return batch

    best_acc, best_loss = -math.inf, math.inf
    best_key = None
    best_state = params.copy()
    wait = 0
    for epoch in range(config.max_epochs):
        losses = []
        try:
            for sp in train_splits:
                with Tape() as tape:
                    res = _forward(sp.graph, params, config, TRAIN, dropout_rng)
                    J = masked_cross_entropy(res.output, sp.graph.labels, sp.mask, config.multi_label)
                    total = J
                    R = L2 = None
                    if config.variant.use_regularizer:
                        R = triplet_regularizer(res.embedding, triplets_for(sp.graph), config.beta)
                        total = ad.add(total, R)
                    if config.l2 > 0:
                        L2 = ad.l2_norm_sq(params.weights())
                        total = ad.add(total, ad.mul(L2, config.l2))
                step_loss = LossReport(J.item(), 0.0 if R is None else R.item(),
                                       0.0 if L2 is None else L2.item(), config.l2)
                if not np.isfinite(total.item()):
                    raise NonFiniteGradientError(f"non-finite loss at epoch {epoch}")
                grads = backward(tape, total, tensors)
                adam_step(tensors, [grads[t] for t in tensors], opt)
                if config.debug and not params.all_finite():
                    raise NonFiniteGradientError(f"non-finite parameters after epoch {epoch}")
                losses.append(step_loss)
        except NonFiniteGradientError as exc:
            log.warning("seed %d diverged: %s", seed, exc)
            report.status = "diverged"
            break

        cache: dict = {}
        val_loss, val_metric = _evaluate_splits(val_splits, params, config, cache)
        _, train_metric = _evaluate_splits(train_splits, params, config, cache)
        report.wall_time_per_eval.extend(cache.get("_times", []))
        rec = EpochRecord(epoch, float(np.mean([l.total for l in losses])),
                          float(np.mean([l.j for l in losses])), float(np.mean([l.r for l in losses])),
                          float(np.mean([l.l2 for l in losses])), val_loss, val_metric, train_metric)
        report.epochs.append(rec)
        if callback is not None:
            callback(rec)

        key = (val_metric, -val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best_state = params.copy()
            report.best_epoch = epoch
            report.best_val_metric = val_metric
            report.best_val_loss = val_loss

        improved = False
        if val_metric > best_acc:
            best_acc, improved = val_metric, True
        if val_loss < best_loss:
            best_loss, improved = val_loss, True
        wait = 0 if improved else wait + 1
        if wait >= config.patience:
            log.debug("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break

    report.params = best_state
    cache = {}
    if report.best_epoch >= 0:
        _, report.train_metric = _evaluate_splits(train_splits, best_state, config, cache)
        _, report.val_metric = _evaluate_splits(val_splits, best_state, config, cache)
        if test_splits:
            _, report.test_metric = _evaluate_splits(test_splits, best_state, config, cache)
    return report


def train(ds: GraphDataset, config: GesmConfig,
          callback: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Full-batch transductive training on ``ds``'s train mask.

    Early stopping watches validation accuracy and loss; the parameters with
    the highest validation accuracy (ties: lower loss) are restored before
    the test metric is computed. The returned report carries them as
    ``report.params``.
    """
    if config.multi_label != ds.multi_label:
        raise ValueError("config task does not match the dataset's label type")
    for name in ("train_mask", "val_mask"):
        if not getattr(ds, name).any():
            raise ValueError(f"dataset has an empty {name}")
    pg = PreparedGraph(ds, config.np_dtype)
    test = [_Split(pg, ds.test_mask)] if ds.test_mask.any() else []
    return _fit([_Split(pg, ds.train_mask)], [_Split(pg, ds.val_mask)], test, config, ds.f, ds.c,
                callback)


def train_inductive(train_graphs: Sequence[GraphDataset], val_graphs: Sequence[GraphDataset],
                    test_graphs: Sequence[GraphDataset], config: GesmConfig,
                    callback: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Train on whole graphs, one gradient step per training graph per epoch.

    Every node of a training graph is supervised; validation and test graphs
    only ever see evaluation passes.
    """
    graphs = list(train_graphs) + list(val_graphs) + list(test_graphs)
    if not train_graphs or not val_graphs:
        raise ValueError("need at least one training and one validation graph")
    f, c = graphs[0].f, graphs[0].c
    if any(g.f != f or g.c != c for g in graphs):
        raise ValueError("all graphs must share feature width and label count")

    def splits(gs):
        out = []
        for g in gs:
            out.append(_Split(PreparedGraph(g, config.np_dtype), np.ones(g.n, dtype=bool)))
        return out

    return _fit(splits(train_graphs), splits(val_graphs), splits(test_graphs), config, f, c, callback)


# -- seed sweeps -------------------------------------------------------------------

@dataclass
class SeedSweep:
    seeds: list[int]
    metrics: list[float]
    failures: dict[int, str]
    reports: list[TrainReport] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.metrics))

    @property
    def std(self) -> float:
        return float(np.std(self.metrics, ddof=1)) if len(self.metrics) > 1 else 0.0

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "seeds": self.seeds, "metrics": self.metrics,
                "failures": {str(k): v for k, v in self.failures.items()}}


def run_seeds(ds: GraphDataset, config: GesmConfig, k: int, split: SplitSpec | None = None,
              seeds: Iterable[int] | None = None) -> SeedSweep:
    """``k`` independent runs with seeds ``config.seed .. config.seed + k - 1``.

    With ``split`` given, each run re-draws its masks with the run's seed
    (random low-label-rate protocol); otherwise the dataset's masks are used.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seed_list = list(seeds) if seeds is not None else [config.seed + i for i in range(k)]
    ok_seeds, metrics, failures, reports = [], [], {}, []
    for s in seed_list:
        run_ds = ds if split is None else apply_split(ds, dataclasses.replace(split, seed=s))
        try:
            rep = train(run_ds, config.replace(seed=s))
        except Exception as exc:  # recorded per run; fatal only if every run fails
            failures[s] = f"{type(exc).__name__}: {exc}"
            log.warning("seed %d failed: %s", s, exc)
            continue
        if rep.diverged or not np.isfinite(rep.test_metric):
            failures[s] = rep.status
            continue
        ok_seeds.append(s)
        metrics.append(rep.test_metric)
        reports.append(rep)
        log.info("seed %d: test %.4f (best epoch %d)", s, rep.test_metric, rep.best_epoch)
    if not metrics:
        raise RuntimeError(f"all {len(seed_list)} runs failed: {failures}")
    return SeedSweep(ok_seeds, metrics, failures, reports)
