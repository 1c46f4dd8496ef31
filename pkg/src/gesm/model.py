"""Step-mixture network with optional neighborhood-interaction attention.

Pipeline: embed node features, optionally re-weight them with multi-head
attention over each node's neighborhood, concatenate ``s + 1`` random-walk
propagations of the result, and classify the concatenation with one linear
layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import CsrMatrix
from .optim import glorot_init

TRAIN = "train"
EVAL = "eval"

TRACE_POOLING = "trace"
OUTER_SUM_POOLING = "outer_sum"


@dataclass(frozen=True)
class GesmVariant:
    use_attention: bool = True
    use_regularizer: bool = True

    @classmethod
    def from_name(cls, name: str) -> GesmVariant:
        try:
            return VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None

    @property
    def name(self) -> str:
        for key, value in VARIANTS.items():
            if value == self:
                return key
        return f"att={self.use_attention},reg={self.use_regularizer}"

    @property
    def label(self) -> str:
        if not self.use_attention and not self.use_regularizer:
            return "GESM (w/o att, reg)"
        if not self.use_regularizer:
            return "GESM (w/o reg)"
        if not self.use_attention:
            return "GESM (w/o att)"
        return "GESM"


VARIANTS = {
    "base": GesmVariant(use_attention=False, use_regularizer=False),
    "att": GesmVariant(use_attention=True, use_regularizer=False),
    "full": GesmVariant(use_attention=True, use_regularizer=True),
}


@dataclass
class GesmParams:
    """Learnable weights.

    Without attention only ``embed`` is used for the first stage; with
    attention each head has its own projection and attention vector.
    """

    steps: int
    hidden: int
    pred_weight: Tensor
    pred_bias: Tensor
    embed: Tensor | None = None
    head_weights: list[Tensor] = field(default_factory=list)
    head_vectors: list[Tensor] = field(default_factory=list)

    @property
    def heads(self) -> int:
        return len(self.head_weights)

    def tensors(self) -> list[Tensor]:
        out = [] if self.embed is None else [self.embed]
        out += self.head_weights + self.head_vectors
        return out + [self.pred_weight, self.pred_bias]

    def weights(self) -> list[Tensor]:
        """Tensors subject to L2 penalty (everything except the bias)."""
        return [t for t in self.tensors() if t is not self.pred_bias]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"pred_weight": self.pred_weight.data, "pred_bias": self.pred_bias.data,
                 "steps": np.asarray(self.steps), "hidden": np.asarray(self.hidden)}
        if self.embed is not None:
            state["embed"] = self.embed.data
        for i, (w, a) in enumerate(zip(self.head_weights, self.head_vectors)):
            state[f"head{i}_weight"] = w.data
            state[f"head{i}_vector"] = a.data
        return state

    @classmethod
    def from_state_dict(cls, state) -> GesmParams:
        def t(key):
            return Tensor(np.array(state[key]), requires_grad=True)

        heads = sum(1 for k in state if k.endswith("_weight") and k.startswith("head"))
        return cls(
            steps=int(state["steps"]),
            hidden=int(state["hidden"]),
            pred_weight=t("pred_weight"),
            pred_bias=t("pred_bias"),
            embed=t("embed") if "embed" in state else None,
            head_weights=[t(f"head{i}_weight") for i in range(heads)],
            head_vectors=[t(f"head{i}_vector") for i in range(heads)],
        )

    def copy(self) -> GesmParams:
        return GesmParams.from_state_dict({k: np.array(v, copy=True) for k, v in self.state_dict().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors())


def init_params(n_features: int, n_classes: int, hidden: int, steps: int, variant: GesmVariant,
                rng: np.random.Generator, heads: int = 8, dtype=np.float64) -> GesmParams:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    params = GesmParams(
        steps=steps,
        hidden=hidden,
        pred_weight=None,  # filled below so the draw order is embed -> heads -> pred
        pred_bias=Tensor(np.zeros((1, n_classes), dtype=dtype), requires_grad=True),
    )
    if variant.use_attention:
        if heads < 1 or hidden % heads:
            raise ValueError(f"hidden width {hidden} is not divisible by {heads} heads")
        width = hidden // heads
        for _ in range(heads):
            params.head_weights.append(glorot_init(n_features, width, rng, dtype))
            params.head_vectors.append(glorot_init(1, width, rng, dtype))
    else:
        params.embed = glorot_init(n_features, hidden, rng, dtype)
    params.pred_weight = glorot_init((steps + 1) * hidden, n_classes, rng, dtype)
    return params


# -- stages ------------------------------------------------------------------

def _project(X, W) -> Tensor:
    if isinstance(X, CsrMatrix):
        return ad.spmm_const(X, W)
    return ad.matmul(X, W)


def embed(X, W, activation=ad.elu) -> Tensor:
    """Z = activation(X W); ``X`` may be dense or a constant CsrMatrix."""
    return activation(_project(X, W))


def attention_encodings(Z_head, a_head) -> Tensor:
    """Row-wise hadamard product of a head's embedding with its vector."""
    Z_head, a_head = ad.as_tensor(Z_head), ad.as_tensor(a_head)
    if a_head.data.size != Z_head.shape[1] or a_head.shape[-1] != Z_head.shape[1]:
        raise ad.ShapeError(f"head vector of shape {a_head.shape} does not match width {Z_head.shape[1]}")
    return ad.mul(Z_head, a_head)


def attention_logits(E, pattern: CsrMatrix, pooling: str = TRACE_POOLING) -> Tensor:
    if pooling == TRACE_POOLING:
        return ad.edge_dot(E, E, pattern)
    if pooling == OUTER_SUM_POOLING:
        totals = ad.row_sum(E)
        return ad.edge_dot(totals, totals, pattern)
    raise ValueError(f"unknown attention pooling {pooling!r}")


def attention_matrix(E, pattern: CsrMatrix, pooling: str = TRACE_POOLING) -> tuple[Tensor, CsrMatrix]:
    """Neighborhood softmax of encoding interactions on ``pattern``.

    Returns the differentiable attention values (one per stored entry) and
    the same values as a CsrMatrix sharing ``pattern``'s sparsity.
    """
    return ad.masked_row_softmax_sparse(attention_logits(E, pattern, pooling), pattern)


def attention_feature(X, params: GesmParams, pattern: CsrMatrix,
                      pooling: str = TRACE_POOLING, activation=ad.elu) -> Tensor:
    """Concatenate ``activation(alpha_i Z_i)`` over all heads."""
    if not params.head_weights:
        raise ValueError("parameters carry no attention heads")
    outputs = []
    for W, a in zip(params.head_weights, params.head_vectors):
        Z = embed(X, W, activation)
        alpha, _ = attention_matrix(attention_encodings(Z, a), pattern, pooling)
        outputs.append(activation(ad.spmm_values(pattern, alpha, Z)))
    return ad.concat_cols(outputs)


def step_mixture(H, A_hat: CsrMatrix, steps: int) -> Tensor:
    """[H | A H | A^2 H | ... | A^s H], built by repeated multiplication."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    H = ad.as_tensor(H)
    blocks = [H]
    for _ in range(steps):
        blocks.append(ad.spmm_const(A_hat, blocks[-1]))
    return blocks[0] if steps == 0 else ad.concat_cols(blocks)


def prediction_logits(f_cat, W, b=None) -> Tensor:
    out = ad.matmul(f_cat, W)
    return out if b is None else ad.add(out, b)


def mixture_logits(H, A_hat: CsrMatrix, steps: int, W, b=None) -> Tensor:
    """``prediction_logits(step_mixture(H, A_hat, steps), W, b)`` without building f_cat.

    Each step's block meets its slice of W as soon as it exists, so memory
    traffic stays at one (n x h) block per step and cost grows linearly in s.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    H = ad.as_tensor(H)
    W = ad.as_tensor(W)
    h = H.shape[1]
    if W.shape[0] != (steps + 1) * h:
        raise ad.ShapeError(f"W has {W.shape[0]} rows, expected {(steps + 1) * h}")
    block = H
    out = ad.matmul(block, ad.slice_rows(W, 0, h))
    for k in range(1, steps + 1):
        block = ad.spmm_const(A_hat, block)
        out = ad.add(out, ad.matmul(block, ad.slice_rows(W, k * h, (k + 1) * h)))
    return out if b is None else ad.add(out, b)


def predict(f_cat, W, b=None, multi_label: bool = False) -> Tensor:
    """Class probabilities: row softmax, or elementwise sigmoid for multi-label."""
    logits = prediction_logits(f_cat, W, b)
    return ad.sigmoid(logits) if multi_label else ad.row_softmax(logits)


def sparse_dropout(X: CsrMatrix, p: float, rng: np.random.Generator) -> CsrMatrix:
    keep = rng.random(X.nnz) >= p
    return X.with_values(X.values * keep / (1.0 - p))


class ForwardResult(NamedTuple):
    output: Tensor
    embedding: Tensor
    logits: Tensor


def forward(X, A_hat: CsrMatrix, params: GesmParams, variant: GesmVariant, mode: str = EVAL, *,
            dropout: float = 0.0, rng: np.random.Generator | None = None,
            multi_label: bool = False, pooling: str = TRACE_POOLING) -> ForwardResult:
    """Full pass. ``embedding`` is the pre-propagation representation.

    Dropout (rate ``dropout``) hits the input features and the step mixture,
    and only in train mode.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    training = mode == TRAIN and dropout > 0.0
    if training:
        if isinstance(X, CsrMatrix):
            X = sparse_dropout(X, dropout, rng)
        else:
            X = ad.dropout(X, dropout, rng)

    if variant.use_attention:
        H = attention_feature(X, params, A_hat, pooling)
    else:
        H = embed(X, params.embed)
    if training:
        f_cat = ad.dropout(step_mixture(H, A_hat, params.steps), dropout, rng)
        logits = prediction_logits(f_cat, params.pred_weight, params.pred_bias)
    else:
        logits = mixture_logits(H, A_hat, params.steps, params.pred_weight, params.pred_bias)
    output = ad.sigmoid(logits) if multi_label else ad.row_softmax(logits)
    return ForwardResult(output, H, logits)
