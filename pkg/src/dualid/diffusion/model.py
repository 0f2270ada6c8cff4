"""Noise-prediction loss and the pretrained base model (denoiser + text encoder)."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_is_fitted

from ..autodiff import AdamW, Module, Tensor, no_grad
from ..autodiff import tensor as T
from ..base import ModuleEstimator, ValidationError, check_images
from ..text.encoder import TextEncoder, mean_name_embedding
from ..text.vocab import NAME_TOKENS, PLACEHOLDER, VOCAB, Vocabulary, tokenize
from .schedule import NoiseSchedule, make_schedule, q_sample
from .unet import Denoiser, DenoiserConfig, DenoiserContext


def to_model_space(pixels: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(pixels, dtype=np.float32) - 1.0).astype(np.float32)


def to_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


def diffusion_loss(x0: np.ndarray, model, context, schedule: NoiseSchedule, rng: np.random.Generator,
                   t=None) -> Tensor:
    """Mean squared error between the injected noise and ``model(x_t, t, context)``.

    ``t`` is drawn uniformly per sample unless given; ``context`` is passed
    through to ``model`` unchanged.
    """
    x0 = np.asarray(x0)
    if len(x0) == 0:
        raise ValidationError("diffusion_loss: empty batch")
    n = len(x0)
    if t is None:
        t = rng.integers(0, schedule.T, n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(schedule, x0, t, eps)
    return T.mse(model(x_t, t, context), Tensor(eps))


class BaseModel(Module):
    """The frozen prior: text encoder plus denoiser."""

    def __init__(self, rng: np.random.Generator, config: DenoiserConfig, vocab: Vocabulary = VOCAB,
                 text_layers: int = 2):
        self.text_encoder = TextEncoder(len(vocab), rng, dim=config.text_dim, layers=text_layers,
                                        heads=config.heads)
        self.denoiser = Denoiser(rng, config)

    def context(self, token_ids, **adapter) -> DenoiserContext:
        return DenoiserContext(self.text_encoder(np.asarray(token_ids)), **adapter)


def randomize_subject(caption: str, rng: np.random.Generator, probs=(1 / 3, 1 / 3, 1 / 3)) -> str:
    """Swap the subject ``a person`` for a random name token or the ``<id>`` placeholder.

    This is what makes name tokens and name slots mean "some person" to the
    prior, so a mean name embedding is a meaningful anchor.
    """
    choice = rng.choice(3, p=probs)
    if choice == 0:
        return caption
    subject = NAME_TOKENS[rng.integers(len(NAME_TOKENS))] if choice == 1 else PLACEHOLDER
    return caption.replace("of a person", f"of {subject}", 1)


def omit_default_background(caption: str, rng: np.random.Generator, background: str, prob: float) -> str:
    """Drop ``on a <background> background`` with probability ``prob`` when it names ``background``.

    The grammar already leaves the other defaults implicit (no hat phrase,
    no ``full body``).  Doing the same for the default background gives
    the minimal caption a definite meaning to the prior: a plain portrait.
    """
    phrase = f" on a {background} background"
    if phrase in caption and rng.random() < prob:
        return caption.replace(phrase, "", 1)
    return caption


class BaseDiffusion(ModuleEstimator):
    """Text-conditioned pixel diffusion model trained from scratch.

    ``fit(X, captions)`` takes images in [0, 1] and caption strings.  During
    training the subject phrase is randomized (see :func:`randomize_subject`)
    and ``caption_dropout`` of captions are replaced by the empty prompt.
    Captions naming ``default_background`` lose that phrase with probability
    ``background_omission`` (see :func:`omit_default_background`).
    After fitting every parameter is frozen.
    """

    _fitted_meta = ("loss_history_",)

    def __init__(self, c1: int = 16, c2: int = 32, text_dim: int = 64, heads: int = 2, text_layers: int = 2,
                 T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, epochs: int = 20,
                 batch_size: int = 32, learning_rate: float = 2e-3, warmup_steps: int = 100,
                 caption_dropout: float = 0.1, default_background: str = "gray", background_omission: float = 0.5,
                 seed: int = 0):
        self.c1 = c1
        self.c2 = c2
        self.text_dim = text_dim
        self.heads = heads
        self.text_layers = text_layers
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.caption_dropout = caption_dropout
        self.default_background = default_background
        self.background_omission = background_omission
        self.seed = seed

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(c1=self.c1, c2=self.c2, text_dim=self.text_dim, temb_dim=self.text_dim,
                              heads=self.heads)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def _build(self, **_):
        return BaseModel(np.random.default_rng(self.seed), self.denoiser_config, text_layers=self.text_layers)

    def fit(self, X, captions, callback=None):
        X = to_model_space(check_images(X))
        captions = list(captions)
        if len(captions) != len(X):
            raise ValidationError(f"{len(X)} images but {len(captions)} captions")
        for c in captions:
            tokenize(c)
        rng = np.random.default_rng(self.seed)
        self.net_ = self._build()
        schedule = self.schedule
        params = self.net_.trainable_parameters()
        opt = AdamW(params, lr=self.learning_rate, weight_decay=1e-4)
        steps_per_epoch = math.ceil(len(X) / self.batch_size)
        total = self.epochs * steps_per_epoch
        history, step = [], 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            running = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                opt.state.lr = self.learning_rate * _lr_factor(step, self.warmup_steps, total)
                texts = [omit_default_background(randomize_subject(captions[i], rng), rng,
                                                 self.default_background, self.background_omission) for i in idx]
                drop = rng.random(len(idx)) < self.caption_dropout
                ids = np.stack([tokenize("" if d else s).ids for s, d in zip(texts, drop)])
                ctx = self.net_.context(ids)
                loss = diffusion_loss(X[idx], self.net_.denoiser, ctx, schedule, rng)
                loss.backward()
                opt.step()
                running += float(loss.data) * len(idx)
                step += 1
            history.append(running / len(X))
            if callback is not None:
                callback(epoch, history[-1])
        self.loss_history_ = history
        self.net_.freeze()
        return self

    # -- frozen-model helpers --------------------------------------------------

    @property
    def denoiser(self) -> Denoiser:
        check_is_fitted(self, "net_")
        return self.net_.denoiser

    @property
    def text_encoder(self) -> TextEncoder:
        check_is_fitted(self, "net_")
        return self.net_.text_encoder

    def encode_prompts(self, prompts) -> tuple[np.ndarray, list]:
        """Encode prompt strings; returns ``(N, L, D)`` embeddings and the token records."""
        toks = [tokenize(p) for p in prompts]
        with no_grad():
            emb = self.text_encoder(np.stack([t.ids for t in toks])).data
        return emb, toks

    def mean_name_embedding(self):
        if not hasattr(self, "_e_bar"):
            self._e_bar = mean_name_embedding(self.text_encoder)
        return self._e_bar

    def loss(self, X, captions, rng, t=None) -> float:
        """Noise-prediction loss of the frozen model on a batch (no subject randomization)."""
        x0 = to_model_space(check_images(X))
        with no_grad():
            ctx = self.net_.context(np.stack([tokenize(c).ids for c in captions]))
            return float(diffusion_loss(x0, self.denoiser, ctx, self.schedule, rng, t).data)


def _lr_factor(step: int, warmup: int, total: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def pretrain_base(dataset, epochs: int = 20, lr: float = 2e-3, seed: int = 0, callback=None,
                  **params) -> BaseDiffusion:
    """Train the base model on a compositional dataset with full captions."""
    if dataset.kind != "compositional":
        raise ValidationError("pretraining expects the compositional split")
    from ..text.vocab import detokenize
    captions = [detokenize(c) for c in dataset.captions]
    return BaseDiffusion(epochs=epochs, learning_rate=lr, seed=seed, **params).fit(
        dataset.images, captions, callback=callback)
