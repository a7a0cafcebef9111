"""Exponential moving average of a flat parameter vector.

``nu_t = beta * nu_{t-1} + (1 - beta) * theta_t``, applied once after every
optimizer step, starting from ``nu_0 = theta_0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DECAY = 0.999


@dataclass(frozen=True)
class EMAState:
    average: np.ndarray
    decay: float
    step: int = 0


def _as_vector(theta) -> np.ndarray:
    arr = np.asarray(theta)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def ema_init(theta0, decay: float = DEFAULT_DECAY) -> EMAState:
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    theta0 = _as_vector(theta0)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("initial parameters contain non-finite values")
    return EMAState(theta0.copy(), float(decay), 0)


def ema_update(state: EMAState, theta) -> EMAState:
    theta = np.asarray(theta, dtype=state.average.dtype)
    if theta.shape != state.average.shape:
        raise ValueError(f"shape mismatch: EMA {state.average.shape} vs parameters {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameters contain non-finite values")
    beta = state.average.dtype.type(state.decay)
    average = beta * state.average + (1 - beta) * theta
    return EMAState(average, state.decay, state.step + 1)


def ema_extract(state: EMAState) -> np.ndarray:
    return state.average.copy()
