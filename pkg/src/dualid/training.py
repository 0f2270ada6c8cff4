"""Identity-focused branch training on the portrait split.

Each branch is trained alone against the frozen base model with the plain
noise-prediction loss.  The text branch feeds its raw name embeddings into
the slots of ``"a photo of <id>"``; the adapter branch conditions on
``"a photo of a person"`` and merges by raw addition (``H + H'``).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import AdamW, Tensor, no_grad
from .base import ModuleEstimator, ValidationError, check_images
from .branches.merge import TRAINING_MERGE
from .branches.qformer import AdapterBranch, TextBranch
from .data.synth import MINIMAL_CAPTION
from .diffusion.model import diffusion_loss, to_model_space
from .diffusion.unet import DenoiserContext
from .text.encoder import splice_tensor
from .text.vocab import PLACEHOLDER, tokenize

BRANCHES = ("text", "adapter")
DEFAULT_LR = {"text": 1e-4, "adapter": 1e-5}
TEXT_TRAINING_PROMPT = f"a photo of {PLACEHOLDER}"
ADAPTER_TRAINING_PROMPT = MINIMAL_CAPTION
PORTRAIT_MIN_AREA = 0.6


@dataclass(frozen=True)
class BranchTrainingConfig:
    """``learning_rate=None`` picks the per-branch default (text 1e-4, adapter 1e-5)."""

    branch: str = "text"
    epochs: int = 12
    learning_rate: float | None = None
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValidationError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise ValidationError(f"learning_rate must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.branch] if self.learning_rate is None else self.learning_rate


class IdentityBranch(ModuleEstimator, TransformerMixin):
    """One trained identity branch.

    ``fit(X, base=..., encoder=...)`` trains on portrait images ``X`` with
    the base model and face encoder frozen; ``transform(features)`` maps
    identity features to the branch output (name embeddings or adapter
    tokens).
    """

    _fitted_meta = ("loss_history_", "site_widths_")

    def __init__(self, branch: str = "text", epochs: int = 12, learning_rate: float | None = None,
                 batch_size: int = 32, seed: int = 0, layers: int | None = None, width: int = 64,
                 id_dim: int = 32, out_dim: int = 64, n_tokens: int = 4, zero_init_output: bool = False):
        self.branch = branch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.layers = layers
        self.width = width
        self.id_dim = id_dim
        self.out_dim = out_dim
        self.n_tokens = n_tokens
        self.zero_init_output = zero_init_output

    @property
    def config(self) -> BranchTrainingConfig:
        return BranchTrainingConfig(self.branch, self.epochs, self.learning_rate, self.batch_size, self.seed)

    def _build(self, site_widths_=(), **_):
        rng = np.random.default_rng(self.seed)
        if self.branch == "text":
            return TextBranch(rng, self.id_dim, self.out_dim, self.layers or 2, self.width)
        return AdapterBranch(rng, list(site_widths_), self.id_dim, self.out_dim, self.n_tokens,
                             self.layers or 3, self.width, zero_init_output=self.zero_init_output)

    def init_net(self, base) -> "IdentityBranch":
        """Build an untrained branch wired to ``base`` (adapter K'/V' copied from the sites)."""
        cfg = self.config  # validates
        self.site_widths_ = list(base.denoiser.site_widths) if cfg.branch == "adapter" else []
        self.net_ = self._build(self.site_widths_)
        if cfg.branch == "adapter":
            self.net_.init_from_denoiser(base.denoiser)
        self.loss_history_ = []
        return self

    def fit(self, X, y=None, *, base, encoder, callback=None):
        cfg = self.config
        X = check_images(X)
        self.init_net(base)
        models = {"base": base.net_, "encoder": encoder.net_}
        trainable = {n for n, p in self.net_.named_parameters() if not p.frozen}
        for label, m in models.items():
            leaked = [n for n, p in m.named_parameters() if not p.frozen]
            if leaked:
                raise ValidationError(f"{label} has unfrozen parameters: {leaked[:3]}")
        features = encoder.transform(X)
        x0 = to_model_space(X)
        rng = np.random.default_rng(cfg.seed)
        params = self.net_.trainable_parameters()
        if {p.name for p in params} != trainable:
            raise ValidationError("trainable parameter set does not match the branch")
        opt = AdamW(params, lr=cfg.lr, weight_decay=1e-4)
        conditioner = self._conditioner(base)
        schedule = base.schedule
        history = []
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(X))
            running = 0.0
            for start in range(0, len(X), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                ctx = conditioner(features[idx])
                loss = diffusion_loss(x0[idx], base.denoiser, ctx, schedule, rng)
                loss.backward()
                opt.step()
                running += float(loss.data) * len(idx)
            history.append(running / len(X))
            if callback is not None:
                callback(epoch, history[-1])
        self.loss_history_ = history
        self.net_.freeze()
        return self

    def _conditioner(self, base):
        if self.branch == "text":
            tok = tokenize(TEXT_TRAINING_PROMPT)
            with no_grad():
                emb = base.text_encoder(tok.ids[None]).data
            slot = tok.slot_positions[0]

            def conditioner(feats):
                rows = self.net_(feats)
                ctx = Tensor(np.repeat(emb, len(feats), axis=0))
                return DenoiserContext(splice_tensor(ctx, rows, slot))
        else:
            with no_grad():
                emb = base.text_encoder(tokenize(ADAPTER_TRAINING_PROMPT).ids[None]).data

            def conditioner(feats):
                return DenoiserContext(Tensor(np.repeat(emb, len(feats), axis=0)),
                                       adapter_tokens=self.net_(feats),
                                       adapter_proj=self.net_.projections, rescale=TRAINING_MERGE)
        return conditioner

    def transform(self, features) -> np.ndarray:
        check_is_fitted(self, "net_")
        f = np.asarray(features, dtype=np.float32)
        if f.ndim != 2 or f.shape[1] != self.id_dim:
            raise ValidationError(f"expected identity features (N, {self.id_dim}), got {f.shape}")
        with no_grad():
            return self.net_(f).data

    @property
    def projections(self):
        check_is_fitted(self, "net_")
        return self.net_.projections if self.branch == "adapter" else None


def check_portrait_dataset(dataset) -> None:
    """Reject anything but a portrait split with minimal-caption-compatible images."""
    if dataset.kind != "portrait":
        raise ValidationError(f"branch training needs the portrait split, got {dataset.kind!r}")
    bad = [i for i, c in enumerate(dataset.compositions) if c.framing != "portrait"]
    if dataset.head_boxes:
        for i, (y0, y1, x0, x1) in enumerate(dataset.head_boxes):
            if (y1 - y0) * (x1 - x0) / (32 * 32) < PORTRAIT_MIN_AREA:
                bad.append(i)
    if bad:
        raise ValidationError(f"{len(set(bad))} images are not portrait framed (first: {min(bad)})")


def train_branch(base, encoder, dataset, config: BranchTrainingConfig, callback=None, **params) -> IdentityBranch:
    check_portrait_dataset(dataset)
    est = IdentityBranch(branch=config.branch, epochs=config.epochs, learning_rate=config.learning_rate,
                         batch_size=config.batch_size, seed=config.seed, **params)
    return est.fit(dataset.images, base=base, encoder=encoder, callback=callback)


def train_text_branch(base, encoder, dataset, config: BranchTrainingConfig | None = None, **kw) -> IdentityBranch:
    config = config or BranchTrainingConfig("text")
    if config.branch != "text":
        raise ValidationError("train_text_branch needs branch='text'")
    return train_branch(base, encoder, dataset, config, **kw)


def train_adapter_branch(base, encoder, dataset, config: BranchTrainingConfig | None = None, **kw) -> IdentityBranch:
    config = config or BranchTrainingConfig("adapter")
    if config.branch != "adapter":
        raise ValidationError("train_adapter_branch needs branch='adapter'")
    return train_branch(base, encoder, dataset, config, **kw)


# -- run manifests -------------------------------------------------------------

def write_loss_csv(path, losses) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def write_manifest(directory, command: str, config: dict, seed: int | None = None, outputs: dict | None = None,
                   losses=None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` (and ``losses.csv`` when given) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": _plain(config), "seed": seed,
              "outputs": {k: str(v) for k, v in (outputs or {}).items()},
              "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if losses is not None:
        record["outputs"]["loss_curve"] = str(write_loss_csv(directory / "losses.csv", losses))
    if extra:
        record.update(_plain(extra))
    path = directory / "manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj
