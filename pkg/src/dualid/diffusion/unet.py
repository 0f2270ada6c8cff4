"""Two-resolution denoiser with text cross-attention sites.

Layout (channels-last, 32x32 input)::

    conv_in -> res0 -> site0            (32x32, c1)
    down    -> res1 -> site1 -> res2 -> site2   (16x16, c2)
    up + skip -> fuse -> res3 -> site3  (32x32, c1)
    norm -> silu -> conv_out

Each site attends from spatial features to the text context.  When the
context carries adapter tokens and projections, the site also attends to
those and merges the two outputs before the shared output projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Conv3x3, LayerNorm, Linear, Module, Tensor
from ..autodiff import tensor as T
from ..branches.merge import BASE_ONLY, RescaleConfig, merge_normalized, merge_uniform
from .schedule import timestep_embedding


@dataclass
class DenoiserContext:
    """Conditioning for one batch.

    ``text`` is ``(N, L, D_txt)``.  ``adapter_tokens`` ``(N, M, D_adp)`` and
    ``adapter_proj`` (one ``(K', V')`` pair of :class:`Linear` per site) are
    both set or both ``None``.  ``recorder``, when a list, receives
    ``(site_index, ||H'|| / ||H||)`` per forward.
    """

    text: Tensor
    adapter_tokens: Tensor | None = None
    adapter_proj: list | None = None
    rescale: RescaleConfig = BASE_ONLY
    recorder: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if (self.adapter_tokens is None) != (self.adapter_proj is None):
            raise ValueError("adapter_tokens and adapter_proj must be given together")

    @property
    def adapter_active(self) -> bool:
        return self.adapter_tokens is not None and self.rescale.adapter_enabled


class AttentionSite(Module):
    def __init__(self, index: int, width: int, context_dim: int, rng: np.random.Generator, heads: int = 2):
        self.norm = LayerNorm(width)
        self.to_q = Linear(width, width, rng, bias=False)
        self.to_k = Linear(context_dim, width, rng, bias=False)
        self.to_v = Linear(context_dim, width, rng, bias=False)
        self.to_out = Linear(width, width, rng)
        self.index = index
        self.width = width
        self.heads = heads

    def host_and_query(self, x: Tensor, ctx: DenoiserContext):
        n, h, w, c = x.shape
        flat = T.reshape(x, (n, h * w, c))
        q = self.to_q(self.norm(flat))
        H = T.attention(q, self.to_k(ctx.text), self.to_v(ctx.text), self.heads)
        return flat, q, H

    def adapter_attention(self, q: Tensor, tokens: Tensor, proj) -> Tensor:
        k_ip, v_ip = proj
        return T.attention(q, k_ip(tokens), v_ip(tokens), self.heads)

    def forward(self, x: Tensor, ctx: DenoiserContext) -> Tensor:
        flat, q, H = self.host_and_query(x, ctx)
        Z = H
        if ctx.adapter_active:
            Hp = self.adapter_attention(q, ctx.adapter_tokens, ctx.adapter_proj[self.index])
            if ctx.recorder is not None:
                nh = np.sqrt((H.data.astype(np.float64) ** 2).sum(axis=(1, 2)))
                nhp = np.sqrt((Hp.data.astype(np.float64) ** 2).sum(axis=(1, 2)))
                ctx.recorder.append((self.index, nhp / np.maximum(nh, 1e-30)))
            cfg = ctx.rescale
            if cfg.merge_mode == "normalized":
                Z = merge_normalized(H, Hp, cfg.alpha, per_token=cfg.per_token_adapter_norm, site=self.index)
            else:
                Z = merge_uniform(H, Hp, cfg.lam)
        out = self.to_out(Z)
        return T.reshape(T.add(flat, out), x.shape)


class ResBlock(Module):
    def __init__(self, width: int, temb_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width)
        self.conv1 = Conv3x3(width, width, rng)
        self.temb = Linear(temb_dim, width, rng)
        self.norm2 = LayerNorm(width)
        self.conv2 = Conv3x3(width, width, rng, init_scale=0.5)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        n, c = temb.shape[0], h.shape[-1]
        h = h + T.reshape(self.temb(temb), (n, 1, 1, c))
        h = self.conv2(T.silu(self.norm2(h)))
        return x + h


@dataclass(frozen=True)
class DenoiserConfig:
    c1: int = 32
    c2: int = 64
    text_dim: int = 64
    temb_dim: int = 64
    heads: int = 2
    image_channels: int = 3


class Denoiser(Module):
    """Noise predictor ``eps_theta(x_t, t, context)``."""

    n_sites = 4

    def __init__(self, rng: np.random.Generator, config: DenoiserConfig = DenoiserConfig()):
        c1, c2, td = config.c1, config.c2, config.temb_dim
        self.config = config
        self.t1 = Linear(td, td, rng)
        self.t2 = Linear(td, td, rng)
        self.conv_in = Conv3x3(config.image_channels, c1, rng)
        self.res0 = ResBlock(c1, td, rng)
        self.down = Conv3x3(c1, c2, rng, stride=2)
        self.res1 = ResBlock(c2, td, rng)
        self.res2 = ResBlock(c2, td, rng)
        self.fuse = Conv3x3(c1 + c2, c1, rng)
        self.res3 = ResBlock(c1, td, rng)
        self.sites = [
            AttentionSite(0, c1, config.text_dim, rng, config.heads),
            AttentionSite(1, c2, config.text_dim, rng, config.heads),
            AttentionSite(2, c2, config.text_dim, rng, config.heads),
            AttentionSite(3, c1, config.text_dim, rng, config.heads),
        ]
        self.norm_out = LayerNorm(c1)
        self.conv_out = Conv3x3(c1, config.image_channels, rng, init_scale=0.0)

    @property
    def site_widths(self) -> list[int]:
        return [s.width for s in self.sites]

    def time_features(self, t, dtype) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.config.temb_dim).astype(dtype))
        return self.t2(T.silu(self.t1(emb)))

    def forward(self, x_t, t, ctx: DenoiserContext) -> Tensor:
        x = T.as_tensor(x_t)
        if x.ndim != 4 or x.shape[1:] != (32, 32, self.config.image_channels):
            raise T.ShapeError(f"denoiser: expected (N, 32, 32, {self.config.image_channels}), got {x.shape}")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = self.time_features(t, self.conv_in.weight.dtype)
        h0 = self.sites[0](self.res0(self.conv_in(x), temb), ctx)
        h = self.res1(self.down(h0), temb)
        h = self.sites[1](h, ctx)
        h = self.sites[2](self.res2(h, temb), ctx)
        h = self.fuse(T.concat([T.upsample2x(h), h0], axis=-1))
        h = self.sites[3](self.res3(h, temb), ctx)
        return self.conv_out(T.silu(self.norm_out(h)))
