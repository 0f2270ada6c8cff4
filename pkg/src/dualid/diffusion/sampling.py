"""Reverse-process updates and the batched sampling loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import no_grad
from ..branches.merge import RescaleConfig
from .schedule import NoiseSchedule

SAMPLERS = ("deterministic", "ancestral")


@dataclass(frozen=True)
class SamplerConfig:
    """``deterministic`` is DDIM with eta=0; ``ancestral`` adds posterior noise (eta=1).

    ``clip_denoised`` clamps the intermediate x0 estimate to the data range
    [-1, 1] before each update.
    """

    steps: int = 30
    sampler: str = "deterministic"
    guidance_scale: float = 1.0
    rescale: RescaleConfig = field(default_factory=RescaleConfig)
    seed: int = 0
    clip_denoised: bool = True

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must be in [1, {T}], got {self.steps}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if not (np.isfinite(self.guidance_scale) and self.guidance_scale >= 0):
            raise ValueError("guidance_scale must be finite and >= 0")

    def replace(self, **kw) -> "SamplerConfig":
        from dataclasses import replace
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


def timestep_grid(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced timesteps from ``T-1`` to ``0`` (both included)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


def predict_x0(schedule: NoiseSchedule, x_t, t: int, eps_hat):
    ab = schedule.alpha_bars[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def sample_step(schedule: NoiseSchedule, x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
                sampler: str = "deterministic", noise: np.ndarray | None = None,
                clip_denoised: bool = False) -> np.ndarray:
    """One reverse update from ``t`` to ``t_prev`` (``t_prev < 0`` means the final step).

    ``deterministic``: x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps_hat.
    ``ancestral``: the DDPM posterior over the (possibly strided) pair
    ``(t_prev, t)``, i.e. its mean plus ``sigma * noise``.  On the final step
    both return the x0 estimate.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    if not (0 <= t < schedule.T and t_prev < t):
        raise ValueError(f"invalid step {t} -> {t_prev}")
    x0 = predict_x0(schedule, x_t, t, eps_hat)
    if clip_denoised:
        x0 = np.clip(x0, -1.0, 1.0)
    if t_prev < 0:
        return x0.astype(x_t.dtype)
    ab_t, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    if sampler == "deterministic":
        eps = (x_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t) if clip_denoised else eps_hat
        return (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(x_t.dtype)
    beta = 1.0 - ab_t / ab_prev
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t
    sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))
    if noise is not None:
        mean = mean + sigma * noise
    return mean.astype(x_t.dtype)


def initial_noise(seeds, shape=(32, 32, 3)) -> np.ndarray:
    """Per-sample starting noise, so a sample does not depend on its batch mates."""
    return np.stack([np.random.default_rng([int(s), 0]).standard_normal(shape) for s in seeds]).astype(np.float32)


def sample_loop(denoiser, schedule: NoiseSchedule, context, seeds, cfg: SamplerConfig,
                uncond_context=None) -> np.ndarray:
    """Run the reverse process for a batch; returns model-space ``x_0`` (unclamped).

    ``context`` is a :class:`DenoiserContext` for the whole batch.  With
    ``guidance_scale != 1`` the unconditional context is evaluated as well.
    """
    cfg.validate(schedule.T)
    seeds = list(seeds)
    x = initial_noise(seeds)
    noise_rngs = [np.random.default_rng([int(s), 1]) for s in seeds]
    grid = timestep_grid(schedule.T, cfg.steps)
    guided = cfg.guidance_scale != 1.0
    if guided and uncond_context is None:
        raise ValueError("guidance requires an unconditional context")
    with no_grad():
        for i, t in enumerate(grid):
            t_prev = int(grid[i + 1]) if i + 1 < len(grid) else -1
            eps = denoiser(x, int(t), context).data
            if guided:
                eps_u = denoiser(x, int(t), uncond_context).data
                eps = eps_u + np.float32(cfg.guidance_scale) * (eps - eps_u)
            noise = None
            if cfg.sampler == "ancestral" and t_prev >= 0:
                noise = np.stack([r.standard_normal(x.shape[1:]) for r in noise_rngs]).astype(np.float32)
            x = sample_step(schedule, x, int(t), t_prev, eps, cfg.sampler, noise, cfg.clip_denoised)
    return x
