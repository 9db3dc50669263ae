"""Adam with decoupled weight decay and global-norm gradient clipping."""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from copyforge.network import ModelParameters


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParameters) -> "OptimState":
        return cls(
            m={name: np.zeros_like(params[name]) for name in params.names()},
            v={name: np.zeros_like(params[name]) for name in params.names()},
        )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients by one factor so their global norm is at most ``max_norm``.

    Returns the clipped gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adamw_step(
    params: ModelParameters,
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place update, parameters visited in canonical order."""
    b1, b2 = betas
    state.step += 1
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name in params.names():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        value = params.tensors[name]
        if weight_decay and not ModelParameters.no_decay(name):
            value -= lr * weight_decay * value
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
