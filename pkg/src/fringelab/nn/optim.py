"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: dict, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> AdamState:
        return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                         {k: np.zeros_like(v) for k, v in params.items()}, 0, lr, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("diverged")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
