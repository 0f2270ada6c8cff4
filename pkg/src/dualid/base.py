"""Shared estimator plumbing: input validation, minibatching, persistence."""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .autodiff import no_grad
from .checkpoint import load_checkpoint, save_checkpoint

IMAGE_SHAPE = (32, 32, 3)


class ValidationError(ValueError):
    """Bad user input (shape, range, degenerate data)."""


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a batch of ``(N, 32, 32, 3)`` images in [0, 1]; a single image is promoted."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32, ensure_all_finite=True,
                    input_name=name)
    if X.shape == IMAGE_SHAPE:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != IMAGE_SHAPE:
        raise ValidationError(f"{name}: expected images of shape (N, 32, 32, 3), got {X.shape}")
    return X


def minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batched_forward(fn, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Apply ``fn`` (numpy in, Tensor out) in chunks without recording gradients."""
    outs = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            outs.append(fn(X[start:start + batch_size]).data)
    return np.concatenate(outs, axis=0)


class ModuleEstimator(BaseEstimator):
    """Estimator whose fitted state is one :class:`Module` in ``self.net_``.

    Subclasses implement ``_build(**fitted_meta)`` to reconstruct the network
    from saved metadata and list extra fitted attributes in ``_fitted_meta``.
    """

    _fitted_meta: tuple[str, ...] = ()

    def save(self, path):
        meta = {"class": type(self).__name__, "params": json.dumps(self.get_params(), sort_keys=True),
                "fitted": json.dumps({k: _jsonable(getattr(self, k)) for k in self._fitted_meta},
                                     sort_keys=True),
                "frozen": json.dumps(sorted(n for n, p in self.net_.named_parameters() if p.frozen))}
        return save_checkpoint(path, self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        if meta.get("class") != cls.__name__:
            raise ValidationError(f"{path}: checkpoint holds {meta.get('class')!r}, not {cls.__name__}")
        est = cls(**json.loads(meta["params"]))
        fitted = json.loads(meta["fitted"])
        for k, v in fitted.items():
            setattr(est, k, np.asarray(v) if isinstance(v, list) else v)
        est.net_ = est._build(**fitted)
        est.net_.load_state_dict(tensors)
        frozen = set(json.loads(meta.get("frozen", "[]")))
        for n, p in est.net_.named_parameters():
            p.frozen = n in frozen
        return est


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v
