"""Glorot initialization and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def glorot_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Uniform Glorot/Xavier weights on [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"glorot_init needs positive dimensions, got ({rows}, {cols})")
    limit = np.sqrt(6.0 / (rows + cols))
    data = rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype, copy=False)
    return Tensor(data, requires_grad=True)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> AdamState:
        state = cls(**hyper)
        state.m = [np.zeros_like(_array(p)) for p in params]
        state.v = [np.zeros_like(_array(p)) for p in params]
        return state

    def copy(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` are Tensors or arrays; ``grads`` a matching sequence of arrays.
    Nothing is modified if any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(_array(p)) for p in params]
        state.v = [np.zeros_like(_array(p)) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for p, g in zip(params, grads):
        if _array(p).shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {_array(p).shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; Adam step aborted")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = _array(p)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        arr -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(arr.dtype, copy=False)
    return params, state
