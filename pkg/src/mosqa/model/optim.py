from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    @classmethod
    def zeros(cls, size: int, **hyper) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **hyper)


def clip_by_global_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update of a flat parameter vector, in place.

    The gradient is first rescaled so its global L2 norm is at most
    ``state.clip_norm``.  Returns ``params`` for convenience.
    """
    if params.shape != grad.shape or grad.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    g = clip_by_global_norm(grad, state.clip_norm)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
