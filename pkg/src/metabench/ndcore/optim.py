"""Adam optimizer with bias correction.

Moments live in a mutable AdamState whose tensors mirror the ParamSet; the
step returns a fresh ParamSet and the advanced state. Updates are applied in
lexicographic path order so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .params import ParamSet
from .tape import ShapeError


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: ParamSet, lr: float = 0.001, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, t=0,
            m={p: np.zeros_like(v) for p, v in params.items()},
            v={p: np.zeros_like(v) for p, v in params.items()},
        )


def adam_step(
    params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[ParamSet, AdamState]:
    """One Adam update: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)."""
    for path, value in params.items():
        g = grads.get(path)
        if g is None:
            raise ShapeError(f"missing gradient for parameter {path!r}")
        if g.shape != value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{path!r} shape {value.shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    updated = {}
    for path, value in params.items():
        g = grads[path]
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        updated[path] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return ParamSet(updated), state
