"""Personalized sampling with both identity branches and inference-time rescaling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .base import ValidationError, check_images
from .branches.merge import BASE_ONLY, RescaleConfig, rescale_name
from .diffusion.model import BaseDiffusion, to_pixels
from .diffusion.sampling import SamplerConfig, sample_loop
from .diffusion.unet import DenoiserContext
from .face import AttributeClassifier, FaceEncoder
from .text.vocab import PLACEHOLDER, tokenize
from .training import IdentityBranch

GENERIC_SUBJECT = "a person"
BUNDLE_FILES = {"base": "base.uidc", "encoder": "encoder.uidc", "attributes": "attributes.uidc",
                "text": "text_branch.uidc", "adapter": "adapter_branch.uidc"}


class MissingPlaceholderError(ValidationError):
    pass


@dataclass
class ModelBundle:
    """Everything needed to personalize and to score: frozen base, encoders and both branches."""

    base: BaseDiffusion
    encoder: FaceEncoder
    attributes: AttributeClassifier | None = None
    text_branch: IdentityBranch | None = None
    adapter_branch: IdentityBranch | None = None

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        d = Path(directory)
        parts = {}
        for key, klass in (("base", BaseDiffusion), ("encoder", FaceEncoder), ("attributes", AttributeClassifier),
                           ("text", IdentityBranch), ("adapter", IdentityBranch)):
            path = d / BUNDLE_FILES[key]
            if path.exists():
                parts[key] = klass.load(path)
            elif key in ("base", "encoder"):
                raise FileNotFoundError(f"bundle {d} is missing {path.name}")
        return cls(parts["base"], parts["encoder"], parts.get("attributes"), parts.get("text"), parts.get("adapter"))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for key, est in (("base", self.base), ("encoder", self.encoder), ("attributes", self.attributes),
                         ("text", self.text_branch), ("adapter", self.adapter_branch)):
            if est is not None:
                est.save(d / BUNDLE_FILES[key])
        return d

    @property
    def e_bar(self):
        return self.base.mean_name_embedding()

    # -- conditioning -----------------------------------------------------------

    def build_context(self, prompts, features, rescale: RescaleConfig) -> DenoiserContext:
        """Conditioning for a batch of personalized prompts and identity features.

        With the text branch disabled, ``<id>`` is read as the generic
        subject; with it enabled every prompt must contain ``<id>``.
        """
        prompts = list(prompts)
        features = None if features is None else np.asarray(features, dtype=np.float32)
        use_text = rescale.text_enabled and features is not None
        use_adapter = rescale.adapter_enabled and features is not None
        if use_text:
            if self.text_branch is None:
                raise ValidationError("text branch enabled but not loaded")
            missing = [p for p in prompts if PLACEHOLDER not in p.split()]
            if missing:
                raise MissingPlaceholderError(f"prompt lacks {PLACEHOLDER!r} with the text branch enabled: {missing[0]!r}")
        else:
            prompts = [p.replace(PLACEHOLDER, GENERIC_SUBJECT) for p in prompts]
        emb, toks = self.base.encode_prompts(prompts)
        if use_text:
            e_prime = self.text_branch.transform(features)
            rows = e_prime
            if rescale.text_rescale:
                rows = rescale_name(e_prime, self.e_bar.norm, rescale.beta, rescale.per_token_text_rescale)
            for i, tok in enumerate(toks):
                p0 = tok.slot_positions[0]
                emb[i, p0:p0 + 3] = rows[i]
        adapter = {}
        if use_adapter:
            if self.adapter_branch is None:
                raise ValidationError("adapter branch enabled but not loaded")
            adapter = {"adapter_tokens": Tensor(self.adapter_branch.transform(features)),
                       "adapter_proj": self.adapter_branch.projections}
        return DenoiserContext(Tensor(emb), rescale=rescale if use_adapter else BASE_ONLY, **adapter)

    def unconditional_context(self, n: int) -> DenoiserContext:
        emb, _ = self.base.encode_prompts([""] * n)
        return DenoiserContext(Tensor(emb))

    # -- sampling ---------------------------------------------------------------

    def generate(self, prompts, features, seeds, cfg: SamplerConfig, batch_size: int = 128) -> np.ndarray:
        """Images in [0, 1] for parallel lists of prompts, identity features and seeds.

        ``features=None`` samples from the base model alone.  Samples are
        processed in chunks of ``batch_size``.
        """
        prompts, seeds = list(prompts), list(seeds)
        if len(prompts) != len(seeds) or (features is not None and len(features) != len(prompts)):
            raise ValidationError("prompts, features and seeds must have equal length")
        if not prompts:
            raise ValidationError("nothing to generate")
        for p in prompts:
            tokenize(p)
        out = []
        for start in range(0, len(prompts), batch_size):
            sl = slice(start, start + batch_size)
            feats = None if features is None else np.asarray(features)[sl]
            ctx = self.build_context(prompts[sl], feats, cfg.rescale)
            unc = self.unconditional_context(len(prompts[sl])) if cfg.guidance_scale != 1.0 else None
            x = sample_loop(self.base.denoiser, self.base.schedule, ctx, seeds[sl], cfg, unc)
            out.append(to_pixels(x))
        return np.concatenate(out, axis=0)

    def personalize(self, reference, prompt: str, cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
        """One image of the reference identity following ``prompt``; deterministic in ``cfg.seed``."""
        ref = check_images(reference, "reference")
        if len(ref) != 1:
            raise ValidationError("personalize takes exactly one reference image")
        feats = self.encoder.transform(ref)
        return self.generate([prompt], feats, [cfg.seed], cfg)[0]

    def sample_base(self, prompts, seeds, cfg: SamplerConfig = SamplerConfig(rescale=BASE_ONLY)) -> np.ndarray:
        """Plain base-model samples (no branches)."""
        return self.generate(prompts, None, seeds, cfg)


def personalize(bundle: ModelBundle, reference, prompt: str, cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
    return bundle.personalize(reference, prompt, cfg)
