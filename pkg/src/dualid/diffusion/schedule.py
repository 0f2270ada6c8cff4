"""Linear beta schedule and the forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end``; ``alpha_bars`` is the running product of ``1 - beta``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` may be per-sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: shape mismatch {x0.shape} vs {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"q_sample: t out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def timestep_embedding(t, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal embedding, ``(N, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
