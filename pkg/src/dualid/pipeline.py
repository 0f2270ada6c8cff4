"""End-to-end construction of a model bundle, with each stage cached on disk."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from .data.synth import Dataset, SplitSpec, sample_dataset
from .diffusion.model import BaseDiffusion, pretrain_base
from .face import AttributeClassifier, FaceEncoder, train_attribute_classifier, train_encoder
from .inference import BUNDLE_FILES, ModelBundle
from .training import BranchTrainingConfig, IdentityBranch, train_branch


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_identities: int = 320
    heldout_fraction: float = 0.2
    # face encoder and attribute classifier (compositional split)
    encoder_images_per_identity: int = 16
    encoder_epochs: int = 20
    attribute_epochs: int = 16
    # base model (compositional split)
    base_images_per_identity: int = 16
    base_epochs: int = 48
    base_lr: float = 2e-3
    base_batch_size: int = 32
    c1: int = 16
    c2: int = 32
    caption_dropout: float = 0.1
    background_omission: float = 0.5
    # identity branches (portrait split)
    portrait_images_per_identity: int = 8
    portrait_background: str = "gray"
    text_epochs: int = 48
    text_lr: float = 5e-3
    adapter_epochs: int = 48
    adapter_lr: float = 5e-3
    branch_batch_size: int = 32
    # evaluation
    eval_identities: int = 32
    eval_steps: int = 10
    eval_sampler: str = "ancestral"
    grid_identities: int = 8
    grid_prompts: int = 8


def compositional_split(cfg: PipelineConfig, images_per_identity: int) -> Dataset:
    return sample_dataset(cfg.n_identities, images_per_identity,
                          SplitSpec("compositional", cfg.heldout_fraction), seed=cfg.seed)


def portrait_split(cfg: PipelineConfig) -> Dataset:
    return sample_dataset(cfg.n_identities, cfg.portrait_images_per_identity,
                          SplitSpec("portrait", cfg.heldout_fraction, cfg.portrait_background), seed=cfg.seed)


def _cached(path: Path, klass, build, log):
    if path.exists():
        return klass.load(path)
    t0 = time.time()
    est = build()
    est.save(path)
    log(f"built {path.name} in {time.time() - t0:.1f}s")
    return est


def build_bundle(directory, cfg: PipelineConfig = PipelineConfig(), log=print) -> ModelBundle:
    """Train (or load the cached) encoder, attribute classifier, base model and both branches."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    comp = None

    def comp_data():
        nonlocal comp
        if comp is None:
            comp = compositional_split(cfg, max(cfg.encoder_images_per_identity, cfg.base_images_per_identity))
        return comp

    def enc_data():
        ds = comp_data()
        return ds if cfg.encoder_images_per_identity == cfg.base_images_per_identity else \
            compositional_split(cfg, cfg.encoder_images_per_identity)

    encoder = _cached(d / BUNDLE_FILES["encoder"], FaceEncoder,
                      lambda: train_encoder(enc_data(), epochs=cfg.encoder_epochs, seed=cfg.seed), log)
    attributes = _cached(d / BUNDLE_FILES["attributes"], AttributeClassifier,
                         lambda: train_attribute_classifier(enc_data(), epochs=cfg.attribute_epochs, seed=cfg.seed),
                         log)
    base = _cached(d / BUNDLE_FILES["base"], BaseDiffusion,
                   lambda: pretrain_base(compositional_split(cfg, cfg.base_images_per_identity),
                                         epochs=cfg.base_epochs, lr=cfg.base_lr, seed=cfg.seed,
                                         batch_size=cfg.base_batch_size, c1=cfg.c1, c2=cfg.c2,
                                         caption_dropout=cfg.caption_dropout,
                                         default_background=cfg.portrait_background,
                                         background_omission=cfg.background_omission,
                                         callback=lambda e, l: log(f"base epoch {e} loss {l:.4f}")), log)
    portrait = None

    def portrait_data():
        nonlocal portrait
        if portrait is None:
            portrait = portrait_split(cfg)
        return portrait

    branches = {}
    for name, epochs, lr in (("text", cfg.text_epochs, cfg.text_lr), ("adapter", cfg.adapter_epochs, cfg.adapter_lr)):
        bcfg = BranchTrainingConfig(name, epochs, lr, cfg.branch_batch_size, cfg.seed)
        branches[name] = _cached(
            d / BUNDLE_FILES[name], IdentityBranch,
            lambda bcfg=bcfg: train_branch(base, encoder, portrait_data(), bcfg,
                                           callback=lambda e, l, n=bcfg.branch: log(f"{n} epoch {e} loss {l:.4f}")),
            log)
    return ModelBundle(base, encoder, attributes, branches["text"], branches["adapter"])


def heldout_identities(cfg: PipelineConfig, n: int | None = None) -> dict:
    """Identities reserved from every training split (same universe as the training data)."""
    ds = sample_dataset(cfg.n_identities, 1, SplitSpec("portrait", cfg.heldout_fraction), seed=cfg.seed)
    ids = ds.heldout_identities[: n or len(ds.heldout_identities)]
    return {i: ds.identities[i] for i in ids}
