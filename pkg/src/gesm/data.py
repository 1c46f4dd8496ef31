"""Dataset container, on-disk formats, splits and synthetic graphs.

Binary container layout (little-endian)::

    b"GESM"  u32 version=1  u8 flags (bit0 multi-label, bit1 directed)
    u64 n  u64 f  u64 c  u64 e
    features   n*f f32
    labels     n u32            (n*c u8 when multi-label)
    edges      e pairs of u32
    masks      train, val, test: n u8 each

A JSON document with the same field names is accepted for small fixtures.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import CsrMatrix

log = logging.getLogger(__name__)

MAGIC = b"GESM"
VERSION = 1
FLAG_MULTI_LABEL = 0x1
FLAG_DIRECTED = 0x2
_HEADER = struct.Struct("<4sIBQQQQ")


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class InconsistentLengthError(DatasetError):
    pass


class IndexOutOfRangeError(DatasetError):
    pass


class EmptyGraphError(DatasetError):
    pass


class MaskOverlapError(DatasetError):
    pass


class InfeasibleSplitError(DatasetError):
    pass


class EmbeddingFormatError(ValueError):
    pass


def canonical_edges(edges, n: int, directed: bool) -> np.ndarray:
    """Drop self-loops, symmetrize undirected input, dedupe and sort."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    if not directed:
        edges = np.concatenate([edges, edges[:, ::-1]])
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    keys = np.unique(edges[:, 0] * n + edges[:, 1])
    return np.stack([keys // n, keys % n], axis=1)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """One graph with node features, labels and train/val/test masks.

    ``edges`` is canonicalized on construction; for undirected graphs both
    directions are stored.
    """

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    n_classes: int
    directed: bool = False
    multi_label: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2:
            raise InconsistentLengthError("features must be an (n, f) matrix")
        n = features.shape[0]
        if n == 0:
            raise EmptyGraphError("dataset has no nodes")
        if self.multi_label:
            labels = np.asarray(self.labels, dtype=np.uint8)
            if labels.shape != (n, self.n_classes):
                raise InconsistentLengthError(f"multi-label matrix must be ({n}, {self.n_classes})")
            if labels.max(initial=0) > 1:
                raise IndexOutOfRangeError("multi-label entries must be 0 or 1")
        else:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise InconsistentLengthError(f"expected {n} labels, got {labels.shape}")
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise IndexOutOfRangeError(f"label outside [0, {self.n_classes})")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise IndexOutOfRangeError(f"edge endpoint outside [0, {n})")
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise InconsistentLengthError(f"{name} must have length {n}")
            masks.append(m)
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise MaskOverlapError("train/val/test masks overlap")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", canonical_edges(edges, n, self.directed))
        for name, m in zip(("train_mask", "val_mask", "test_mask"), masks):
            object.__setattr__(self, name, m)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def f(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.n_classes

    @property
    def n_edges(self) -> int:
        """Edge count as a user would state it (undirected pairs counted once)."""
        return len(self.edges) if self.directed else len(self.edges) // 2

    def adjacency(self) -> CsrMatrix:
        """Binary adjacency; entry (u, v) for every stored edge u -> v.

        Propagation multiplies this matrix's column-normalized form from the
        left, so for directed graphs information flows from v to u.
        """
        return CsrMatrix.from_coo(self.edges[:, 0], self.edges[:, 1],
                                  np.ones(len(self.edges)), (self.n, self.n))

    def with_masks(self, train, val, test) -> GraphDataset:
        return replace(self, train_mask=train, val_mask=val, test_mask=test)

    def stats(self) -> dict:
        return {"name": self.name, "n": self.n, "f": self.f, "c": self.c, "edges": self.n_edges,
                "train": int(self.train_mask.sum()), "val": int(self.val_mask.sum()),
                "test": int(self.test_mask.sum())}

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphDataset):
            return NotImplemented
        return (self.directed == other.directed and self.multi_label == other.multi_label
                and self.n_classes == other.n_classes
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("features", "labels", "edges", "train_mask", "val_mask", "test_mask"))
                and self.features.dtype == other.features.dtype)

    __hash__ = None


# -- serialization ---------------------------------------------------------------

def save(ds: GraphDataset, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(_to_json(ds)))
        return
    flags = (FLAG_MULTI_LABEL if ds.multi_label else 0) | (FLAG_DIRECTED if ds.directed else 0)
    labels = ds.labels.astype("<u1") if ds.multi_label else ds.labels.astype("<u4")
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, ds.n, ds.f, ds.c, len(ds.edges)))
        fh.write(ds.features.astype("<f4").tobytes())
        fh.write(labels.tobytes())
        fh.write(ds.edges.astype("<u4").tobytes())
        for m in (ds.train_mask, ds.val_mask, ds.test_mask):
            fh.write(m.astype("<u1").tobytes())


def _to_json(ds: GraphDataset) -> dict:
    return {
        "version": VERSION,
        "multi_label": ds.multi_label,
        "directed": ds.directed,
        "n": ds.n, "f": ds.f, "c": ds.c, "e": len(ds.edges),
        # float32 -> Python float is exact, so the JSON twin round-trips bit-for-bit
        "features": ds.features.astype(np.float64).tolist(),
        "labels": ds.labels.tolist(),
        "edges": ds.edges.tolist(),
        "train_mask": ds.train_mask.astype(int).tolist(),
        "val_mask": ds.val_mask.astype(int).tolist(),
        "test_mask": ds.test_mask.astype(int).tolist(),
    }


def load(path) -> GraphDataset:
    """Read a binary container or its JSON twin and validate it."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        ds = _from_bytes(raw, name=path.stem)
    elif path.suffix == ".json" or raw.lstrip()[:1] == b"{":
        ds = _from_json(raw, name=path.stem)
    else:
        raise MalformedHeaderError(f"{path}: missing GESM magic bytes")
    log.info("loaded %s: n=%d |E|=%d f=%d c=%d train/val/test=%d/%d/%d", path.name, ds.n,
             ds.n_edges, ds.f, ds.c, ds.train_mask.sum(), ds.val_mask.sum(), ds.test_mask.sum())
    return ds


def _from_bytes(raw: bytes, name: str = "") -> GraphDataset:
    if len(raw) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the container header")
    magic, version, flags, n, f, c, e = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedHeaderError("bad magic bytes")
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported container version {version}")
    if flags & ~(FLAG_MULTI_LABEL | FLAG_DIRECTED):
        raise MalformedHeaderError(f"unknown flag bits {flags:#x}")
    if n == 0:
        raise EmptyGraphError("container declares zero nodes")
    multi = bool(flags & FLAG_MULTI_LABEL)
    label_bytes = n * c if multi else 4 * n
    expected = _HEADER.size + 4 * n * f + label_bytes + 8 * e + 3 * n
    if len(raw) != expected:
        raise InconsistentLengthError(f"payload is {len(raw)} bytes, header implies {expected}")

    pos = _HEADER.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    features = take("<f4", n * f).reshape(n, f).astype(np.float32)
    if multi:
        labels = take("<u1", n * c).reshape(n, c)
    else:
        labels = take("<u4", n).astype(np.int64)
        if labels.size and labels.max() >= c:
            raise IndexOutOfRangeError(f"label {labels.max()} outside [0, {c})")
    edges = take("<u4", 2 * e).reshape(e, 2).astype(np.int64)
    if e and edges.max() >= n:
        raise IndexOutOfRangeError(f"edge endpoint {edges.max()} outside [0, {n})")
    train, val, test = (take("<u1", n).astype(bool) for _ in range(3))
    return GraphDataset(features, labels, edges, train, val, test, n_classes=int(c),
                        directed=bool(flags & FLAG_DIRECTED), multi_label=multi, name=name)


def _from_json(raw: bytes, name: str = "") -> GraphDataset:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"invalid JSON: {exc}") from None
    for key in ("n", "f", "c", "features", "labels", "edges"):
        if key not in doc:
            raise MalformedHeaderError(f"JSON container lacks field {key!r}")
    if doc.get("version", VERSION) != VERSION:
        raise MalformedHeaderError(f"unsupported container version {doc['version']}")
    flags = int(doc.get("flags", 0))
    multi = bool(doc.get("multi_label", flags & FLAG_MULTI_LABEL))
    directed = bool(doc.get("directed", flags & FLAG_DIRECTED))
    n, f, c = int(doc["n"]), int(doc["f"]), int(doc["c"])
    if n == 0:
        raise EmptyGraphError("container declares zero nodes")
    features = np.asarray(doc["features"], dtype=np.float32)
    if features.shape != (n, f):
        raise InconsistentLengthError(f"features have shape {features.shape}, expected ({n}, {f})")
    labels = np.asarray(doc["labels"], dtype=np.int64)
    edges = np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2)
    if "e" in doc and len(edges) != int(doc["e"]):
        raise InconsistentLengthError(f"{len(edges)} edges listed, header says {doc['e']}")
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise IndexOutOfRangeError(f"edge endpoint outside [0, {n})")
    if not multi and labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexOutOfRangeError(f"label outside [0, {c})")
    masks = []
    for key in ("train_mask", "val_mask", "test_mask"):
        m = np.asarray(doc.get(key, np.zeros(n)), dtype=bool)
        if m.shape != (n,):
            raise InconsistentLengthError(f"{key} must have length {n}")
        masks.append(m)
    return GraphDataset(features, labels, edges, *masks, n_classes=c, directed=directed,
                        multi_label=multi, name=name)


# -- splits ------------------------------------------------------------------------

PUBLIC = "public"
PER_CLASS = "per-class-count"
LABEL_RATE = "label-rate"


@dataclass(frozen=True)
class SplitSpec:
    mode: str = PUBLIC
    train_per_class: int = 20
    rate: float | None = None
    val_count: int = 500
    test_count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (PUBLIC, PER_CLASS, LABEL_RATE):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == LABEL_RATE and (self.rate is None or not 0 < self.rate < 1):
            raise ValueError("label-rate splits need 0 < rate < 1")


def _planetoid_split(labels, c, per_class, val_count, test_count):
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    for k in range(c):
        members = np.flatnonzero(labels == k)
        if members.size < per_class:
            raise InfeasibleSplitError(f"class {k} has {members.size} nodes, need {per_class}")
        train[members[:per_class]] = True
    rest = np.flatnonzero(~train)
    if rest.size < val_count + test_count:
        raise InfeasibleSplitError("not enough nodes left for validation and test")
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:val_count]] = True
    test[rest[rest.size - test_count:]] = True
    return train, val, test


def stratified_counts(labels, c: int, total: int) -> np.ndarray:
    """Split ``total`` across classes in proportion to class size.

    Largest-remainder rounding, with every class guaranteed one node when
    ``total >= c``.
    """
    sizes = np.bincount(labels, minlength=c).astype(np.float64)
    present = sizes > 0
    exact = total * sizes / sizes.sum()
    counts = np.floor(exact).astype(np.int64)
    if total >= present.sum():
        counts[present & (counts == 0)] = 1
    while counts.sum() > total:
        # take back from the class with the largest surplus over its share
        k = int(np.argmax(np.where(counts > 1, counts - exact, -np.inf)))
        counts[k] -= 1
    remainder = exact - counts
    for k in np.argsort(-remainder, kind="stable"):
        if counts.sum() >= total:
            break
        if counts[k] < sizes[k]:
            counts[k] += 1
    return np.minimum(counts, sizes.astype(np.int64))


def make_split(ds: GraphDataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (train, val, test) boolean masks for ``spec``.

    Public mode returns the dataset's stored masks when it carries any, and
    otherwise the planetoid-style first-``k``-per-class split.
    """
    if spec.mode == PUBLIC:
        if ds.train_mask.any():
            return ds.train_mask.copy(), ds.val_mask.copy(), ds.test_mask.copy()
        if ds.multi_label:
            raise InfeasibleSplitError("multi-label datasets must carry their own split")
        return _planetoid_split(ds.labels, ds.c, spec.train_per_class, spec.val_count, spec.test_count)
    if ds.multi_label:
        raise InfeasibleSplitError("random splits are defined for single-label datasets only")

    rng = np.random.default_rng(spec.seed)
    n = ds.n
    if spec.mode == PER_CLASS:
        per_class = np.full(ds.c, spec.train_per_class, dtype=np.int64)
    else:
        total = int(np.floor(spec.rate * n + 0.5))
        per_class = stratified_counts(ds.labels, ds.c, total)
    train = np.zeros(n, dtype=bool)
    for k in range(ds.c):
        members = np.flatnonzero(ds.labels == k)
        if members.size < per_class[k]:
            raise InfeasibleSplitError(f"class {k} has {members.size} nodes, need {per_class[k]}")
        train[rng.choice(members, size=per_class[k], replace=False)] = True
    rest = np.flatnonzero(~train)
    if rest.size < spec.val_count + spec.test_count:
        raise InfeasibleSplitError("not enough nodes left for validation and test")
    drawn = rng.permutation(rest)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[drawn[:spec.val_count]] = True
    test[drawn[spec.val_count:spec.val_count + spec.test_count]] = True
    return train, val, test


def apply_split(ds: GraphDataset, spec: SplitSpec) -> GraphDataset:
    return ds.with_masks(*make_split(ds, spec))


# -- synthetic graphs ----------------------------------------------------------------

def _is_connected(n: int, edges: np.ndarray) -> bool:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    if n == 1:
        return True
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return connected_components(g, directed=False)[0] == 1


def _fraction_split(labels, c, rng, train_frac, val_frac):
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    for k in range(c):
        members = rng.permutation(np.flatnonzero(labels == k))
        n_train = max(1, int(round(train_frac * members.size)))
        n_val = int(round(val_frac * members.size))
        train[members[:n_train]] = True
        val[members[n_train:n_train + n_val]] = True
    return train, val, ~(train | val)


def synth_two_cluster(n_per_cluster: int, p_in: float, p_out: float, seed: int = 0, *,
                      noise: float = 0.0, require_connected: bool = True, max_retries: int = 50,
                      train_frac: float = 0.5, val_frac: float = 0.25) -> GraphDataset:
    """Two communities; labels are the community and features its noisy one-hot."""
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    rng = np.random.default_rng(seed)
    n = 2 * n_per_cluster
    labels = np.repeat([0, 1], n_per_cluster)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    for _ in range(max_retries):
        keep = rng.random(iu.size) < prob
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        if not require_connected or _is_connected(n, edges):
            break
    else:
        raise RuntimeError(f"no connected two-cluster graph after {max_retries} draws")
    features = np.eye(2)[labels] + noise * rng.standard_normal((n, 2))
    train, val, test = _fraction_split(labels, 2, rng, train_frac, val_frac)
    return GraphDataset(features, labels, edges, train, val, test, n_classes=2,
                        name="two-cluster")


def synth_citation(n: int = 2708, n_classes: int = 7, n_features: int = 1433, *,
                   avg_degree: float = 3.9, homophily: float = 0.8, words_per_node: int = 18,
                   topic_strength: float = 0.15, seed: int = 0) -> GraphDataset:
    """Planted-partition graph with sparse bag-of-words features.

    Defaults mimic the size and sparsity of a small citation network; the
    split is the planetoid-style public split (20 per class, 500/1000).
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    labels[:n_classes] = np.arange(n_classes)
    by_class = [np.flatnonzero(labels == k) for k in range(n_classes)]

    n_edges = int(round(n * avg_degree / 2))
    src = rng.integers(0, n, size=n_edges)
    same = rng.random(n_edges) < homophily
    dst = rng.integers(0, n, size=n_edges)
    for k in range(n_classes):
        idx = np.flatnonzero(same & (labels[src] == k))
        dst[idx] = rng.choice(by_class[k], size=idx.size)
    edges = np.stack([src, dst], axis=1)

    # each class owns a block of topic words
    topic = np.array_split(rng.permutation(n_features), n_classes)
    features = np.zeros((n, n_features), dtype=np.float32)
    for u in range(n):
        k_words = max(1, rng.poisson(words_per_node))
        from_topic = rng.random(k_words) < topic_strength
        words = np.where(from_topic, rng.choice(topic[labels[u]], size=k_words),
                         rng.integers(0, n_features, size=k_words))
        features[u, words] = 1.0

    per_class = min(20, min(len(b) for b in by_class))
    val_count = min(500, n // 5)
    test_count = min(1000, n - per_class * n_classes - val_count)
    train, val, test = _planetoid_split(labels, n_classes, per_class, val_count, test_count)
    return GraphDataset(features, labels, edges, train, val, test, n_classes=n_classes,
                        name="synthetic-citation")


def synth_multilabel(n: int = 60, n_labels: int = 5, n_features: int = 8, *, seed: int = 0,
                     avg_degree: float = 4.0) -> GraphDataset:
    """Small multi-label graph whose labels are noisy functions of features and neighbors."""
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, n_features))
    proj = rng.standard_normal((n_features, n_labels))
    src = rng.integers(0, n, size=int(n * avg_degree / 2))
    dst = (src + rng.integers(1, 4, size=src.size)) % n
    edges = np.stack([src, dst], axis=1)
    labels = (features @ proj > 0).astype(np.uint8)
    train, val, test = _fraction_split(np.zeros(n, dtype=np.int64), 1, rng, 0.6, 0.2)
    return GraphDataset(features, labels, edges, train, val, test, n_classes=n_labels,
                        multi_label=True, name="synthetic-multilabel")


# -- embeddings ----------------------------------------------------------------------

def export_embeddings(Z, path) -> None:
    """Write ``Z`` as text: a "n dim" header, then one row per node at 17 significant digits."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError("embeddings must be a matrix")
    if not np.all(np.isfinite(Z)):
        raise ValueError("embeddings contain non-finite values")
    lines = [f"{Z.shape[0]} {Z.shape[1]}"]
    lines += [" ".join(format(x, ".17g") for x in row) for row in Z]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmbeddingFormatError("empty embedding file")
    try:
        n, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise EmbeddingFormatError(f"bad header line {lines[0]!r}") from None
    rows = [line.split() for line in lines[1:] if line.strip()]
    if len(rows) != n or any(len(r) != dim for r in rows):
        raise EmbeddingFormatError(f"header says {n}x{dim}, file body disagrees")
    return np.array(rows, dtype=np.float64).reshape(n, dim)
