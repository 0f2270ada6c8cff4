"""Q-Former feature mapping and the two identity branches.

Both branches read the same identity feature: it is L2-normalized, scaled
by ``sqrt(D_id)`` and linearly projected to a small set of key/value
tokens, which a stack of query blocks (self-attention, cross-attention to
the tokens, feed-forward) summarizes into the branch output.

* :class:`TextBranch` emits the three name-slot embeddings ``e'``.
* :class:`AdapterBranch` emits ``M`` adapter tokens and owns one key/value
  projection pair per denoiser attention site.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Attention, LayerNorm, Linear, MLP, Module, Parameter, Tensor, no_grad
from ..autodiff import tensor as T


class QFormerBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.ln_self = LayerNorm(width)
        self.self_attn = Attention(width, rng, heads=heads)
        self.ln_cross = LayerNorm(width)
        self.cross_attn = Attention(width, rng, heads=heads)
        self.ln_ff = LayerNorm(width)
        self.ff = MLP(width, 2 * width, rng)

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        q = q + self.self_attn(self.ln_self(q))
        q = q + self.cross_attn(self.ln_cross(q), kv)
        return q + self.ff(self.ln_ff(q))


class QFormer(Module):
    """Learnable queries attending to a projected identity feature.

    Returns ``(N, n_queries, out_dim)``.  ``zero_init_output`` starts the
    output projection at zero (a branch that contributes nothing yet).
    """

    def __init__(self, in_dim: int, n_queries: int, out_dim: int, layers: int, rng: np.random.Generator,
                 width: int = 64, n_kv: int = 4, heads: int = 2, zero_init_output: bool = False):
        self.in_dim = in_dim
        self.n_queries = n_queries
        self.n_kv = n_kv
        self.width = width
        self.proj_in = Linear(in_dim, n_kv * width, rng)
        self.queries = Parameter(rng.normal(0.0, 0.5, (1, n_queries, width)).astype(np.float32))
        self.blocks = [QFormerBlock(width, heads, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(width)
        self.proj_out = Linear(width, out_dim, rng, init_scale=0.0 if zero_init_output else 1.0)

    def forward(self, feature) -> Tensor:
        f = T.as_tensor(feature)
        if f.ndim == 1:
            f = T.reshape(f, (1, f.shape[0]))
        if f.ndim != 2 or f.shape[1] != self.in_dim:
            raise T.ShapeError(f"qformer: expected identity features of width {self.in_dim}, got {f.shape}")
        n = f.shape[0]
        kv = T.reshape(self.proj_in(normalize_feature(f)), (n, self.n_kv, self.width))
        q = T.add(self.queries, Tensor(np.zeros((n, self.n_queries, self.width), dtype=f.dtype)))
        for blk in self.blocks:
            q = blk(q, kv)
        return self.proj_out(self.ln_out(q))


def normalize_feature(f: Tensor) -> Tensor:
    """Unit L2 norm per row, times ``sqrt(dim)`` (a constant, so no gradient flows into the encoder)."""
    d = f.data
    n = np.sqrt(np.sum(d * d, axis=1, keepdims=True))
    scale = np.sqrt(d.shape[1]) / np.maximum(n, 1e-12)
    return T.mul(f, Tensor(scale.astype(d.dtype)))


class TextBranch(Module):
    """Identity feature -> three name-slot embeddings (width ``text_dim``)."""

    n_tokens = 3

    def __init__(self, rng: np.random.Generator, id_dim: int = 32, text_dim: int = 64, layers: int = 2,
                 width: int = 64, heads: int = 2):
        self.qformer = QFormer(id_dim, self.n_tokens, text_dim, layers, rng, width=width, heads=heads)

    def forward(self, feature) -> Tensor:
        return self.qformer(feature)


class AdapterBranch(Module):
    """Identity feature -> ``M`` adapter tokens, plus per-site K'/V' projections.

    ``site_widths`` lists the denoiser's attention-site widths in forward
    order.  Use :meth:`init_from_denoiser` to copy each site's text key/value
    weights into K'/V' before training.
    """

    def __init__(self, rng: np.random.Generator, site_widths, id_dim: int = 32, adapter_dim: int = 64,
                 n_tokens: int = 4, layers: int = 3, width: int = 64, heads: int = 2,
                 zero_init_output: bool = False):
        self.qformer = QFormer(id_dim, n_tokens, adapter_dim, layers, rng, width=width, heads=heads,
                               zero_init_output=zero_init_output)
        self.k_ip = [Linear(adapter_dim, w, rng, bias=False) for w in site_widths]
        self.v_ip = [Linear(adapter_dim, w, rng, bias=False) for w in site_widths]

    @property
    def projections(self) -> list[tuple[Linear, Linear]]:
        return list(zip(self.k_ip, self.v_ip))

    def init_from_denoiser(self, denoiser) -> "AdapterBranch":
        for site, k, v in zip(denoiser.sites, self.k_ip, self.v_ip):
            if site.to_k.weight.shape != k.weight.shape:
                raise T.ShapeError(f"adapter projection {k.weight.shape} does not match site "
                                   f"{site.index} key {site.to_k.weight.shape}")
            k.weight.data = site.to_k.weight.data.copy()
            v.weight.data = site.to_v.weight.data.copy()
        return self

    def forward(self, feature) -> Tensor:
        return self.qformer(feature)


def qformer_map(feature, branch: Module) -> np.ndarray:
    """Run a branch on identity features without recording gradients.

    Returns ``(3, D_txt)`` / ``(M, D_adp)`` for a single feature vector and a
    leading batch axis otherwise.
    """
    single = np.ndim(feature) == 1
    with no_grad():
        out = branch(np.asarray(feature, dtype=np.float32)).data
    return out[0] if single else out


def adapter_attention(site, spatial_queries: Tensor, adapter_tokens: Tensor, proj) -> Tensor:
    """``H'`` at one site: attention from spatial queries to adapter tokens projected by ``proj`` (K', V')."""
    return site.adapter_attention(T.as_tensor(spatial_queries), T.as_tensor(adapter_tokens), proj)
