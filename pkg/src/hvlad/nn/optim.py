from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch

LEARNING_RATE = 1e-4


@dataclass
class AdamState:
    """Moment estimates and step counter for a fixed-rate Adam optimizer."""

    lr: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Only names present in ``grads`` are touched; every one of them must also
    exist in ``params`` with the same shape.
    """
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            got = params[name].shape if name in params else None
            raise ShapeMismatch(f"gradient {name!r} has shape {g.shape}, parameter {got}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= (state.lr * step).astype(p.dtype, copy=False)
