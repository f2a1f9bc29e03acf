"""Adam and Rectified Adam over dicts of named numpy arrays.

Both step functions update ``params`` in place and return ``(params, state)``.
Keys missing from ``grads`` are left untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def moments(self, key: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if key not in self.m:
            self.m[key] = np.zeros_like(like)
            self.v[key] = np.zeros_like(like)
        if self.m[key].shape != like.shape:
            raise ValueError(f"optimizer state shape mismatch for {key}")
        return self.m[key], self.v[key]


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr: float, weight_decay: float = 0.0):
    """Bias-corrected Adam; weight decay is decoupled (``lr * wd * param``)."""
    _check_finite(grads)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        m, v = state.moments(k, p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[k] = p - lr * update - lr * weight_decay * p
    return params, state


def radam_rho(t: int, beta2: float) -> float:
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    bt = beta2**t
    return rho_inf - 2.0 * t * bt / (1.0 - bt)


def radam_rectifier(t: int, beta2: float) -> float | None:
    """Variance rectification factor, or None when the momentum fallback applies."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho = radam_rho(t, beta2)
    if rho <= 4.0:
        return None
    return float(np.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho)))


def radam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float):
    """Rectified Adam; un-rectified momentum step while rho_t <= 4."""
    _check_finite(grads)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    rect = radam_rectifier(t, b2)
    for k, g in grads.items():
        p = params[k]
        m, v = state.moments(k, p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        if rect is None:
            params[k] = p - lr * m_hat
        else:
            params[k] = p - lr * rect * m_hat / (np.sqrt(v / c2) + state.eps)
    return params, state
