"""Merging adapter attention into the host layer, and name-embedding rescaling.

All norms are per sample: for a batched site output ``(N, L, C)`` the norm
of sample ``i`` is the Frobenius norm of ``H[i]``.  Scale factors are formed
as ``weight * (target_norm / source_norm)`` before touching the tensor so
that ``H' == H`` gives exactly ``(1 + alpha) * H``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..autodiff import Tensor
from ..autodiff import tensor as T

MERGE_MODES = ("normalized", "uniform_lambda")
DEAD_NORM = 1e-12


class DeadBranchError(RuntimeError):
    """A branch produced a (near) zero output where a direction is needed."""


@dataclass(frozen=True)
class RescaleConfig:
    """Inference-time weights for both branches.

    ``alpha`` scales the normalised adapter output relative to the host
    layer; ``beta`` scales the normalised name embeddings relative to the
    mean name embedding.  ``merge_mode="uniform_lambda"`` replaces the
    normalised merge by ``H + lam * H'``.  ``text_rescale=False`` splices the
    raw predicted name embeddings.
    """

    alpha: float = 1.2
    beta: float = 1.8
    adapter_enabled: bool = True
    text_enabled: bool = True
    merge_mode: str = "normalized"
    lam: float = 1.0
    per_token_text_rescale: bool = True
    text_rescale: bool = True
    per_token_adapter_norm: bool = False

    def __post_init__(self):
        for key in ("alpha", "beta", "lam"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"RescaleConfig.{key}={v} must be finite and non-negative")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")

    def replace(self, **kw) -> "RescaleConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


TRAINING_MERGE = RescaleConfig(merge_mode="uniform_lambda", lam=1.0, text_rescale=False)
BASE_ONLY = RescaleConfig(adapter_enabled=False, text_enabled=False)


def _sample_axes(x) -> tuple[int, ...]:
    return tuple(range(1, x.ndim)) if x.ndim >= 3 else tuple(range(x.ndim))


def _norm(x: np.ndarray, axes) -> np.ndarray:
    return np.sqrt((x.astype(np.float64) ** 2).sum(axis=axes, keepdims=True)).astype(x.dtype)


def vector_norm(x: np.ndarray, axis=-1) -> np.ndarray:
    """Euclidean norm over ``axis`` (kept); the one norm used for name embeddings."""
    return np.sqrt(np.sum(x * x, axis=axis, keepdims=True))


def merge_uniform(H, H_prime, lam: float):
    """``H + lam * H'``."""
    if H.shape != H_prime.shape:
        raise T.ShapeError(f"merge_uniform: incompatible shapes {H.shape} and {H_prime.shape}")
    if lam == 0:
        return H
    if isinstance(H, Tensor) or isinstance(H_prime, Tensor):
        return T.add(H, H_prime if lam == 1 else T.scale(H_prime, lam))
    return H + (H_prime if lam == 1 else lam * H_prime)


def merge_normalized(H, H_prime, alpha: float, per_token: bool = False, site: int | None = None):
    """``H + alpha * (H' / ||H'||) * ||H||`` with per-sample Frobenius norms.

    ``per_token=True`` takes the norms over the channel axis of every row
    instead.  Raises :class:`DeadBranchError` if ``alpha > 0`` and some
    ``||H'||`` is below 1e-12.
    """
    if H.shape != H_prime.shape:
        raise T.ShapeError(f"merge_normalized: incompatible shapes {H.shape} and {H_prime.shape}")
    if alpha == 0:
        return H
    h = H.data if isinstance(H, Tensor) else np.asarray(H)
    hp = H_prime.data if isinstance(H_prime, Tensor) else np.asarray(H_prime)
    axes = (h.ndim - 1,) if per_token else _sample_axes(h)
    nh, nhp = _norm(h, axes), _norm(hp, axes)
    if np.any(nhp < DEAD_NORM):
        where = f" at site {site}" if site is not None else ""
        raise DeadBranchError(f"adapter output norm below {DEAD_NORM:g}{where}: dead adapter")
    factor = (alpha * (nh / nhp)).astype(h.dtype)
    if isinstance(H, Tensor) or isinstance(H_prime, Tensor):
        if H.requires_grad or H_prime.requires_grad:
            # differentiable path (only used by tests / gradchecks)
            Ht, Hpt = T.as_tensor(H), T.as_tensor(H_prime)
            ax = axes
            ratio = T.div(T.l2_norm(Ht, axis=ax, keepdims=True), T.l2_norm(Hpt, axis=ax, keepdims=True))
            return T.add(Ht, T.mul(Hpt, T.scale(ratio, alpha)))
        return Tensor(h + hp * factor)
    return h + hp * factor


def rescale_name(e_prime, e_bar_norm: float, beta: float, per_token: bool = True) -> np.ndarray:
    """``beta * e' / ||e'|| * ||e_bar||`` for each row of ``e'`` (or the joint triple).

    In joint mode the triple is scaled so its Frobenius norm equals
    ``beta * ||e_bar|| * sqrt(rows)``.
    """
    e = np.asarray(e_prime)
    if per_token:
        n = vector_norm(e, axis=-1)
        target = np.asarray(e_bar_norm, dtype=e.dtype)
    else:
        n = vector_norm(e, axis=(-2, -1)) if e.ndim >= 2 else vector_norm(e, axis=-1)
        rows = e.shape[-2] if e.ndim >= 2 else 1
        target = np.asarray(e_bar_norm * math.sqrt(rows), dtype=e.dtype)
    if np.any(n < DEAD_NORM):
        raise DeadBranchError("predicted name embedding has zero norm: dead text branch")
    return e * (beta * (target / n))
