"""Small transformer text encoder and name-slot utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Attention, Embedding, LayerNorm, MLP, Module, Tensor, no_grad
from ..autodiff import tensor as T
from .vocab import SEQ_LEN, VOCAB, Tokens, Vocabulary, tokenize

NAME_TEMPLATE = "a photo of {name}"


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, rng, heads=heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TextEncoder(Module):
    """Token + position embeddings, two pre-norm blocks, final layer norm."""

    def __init__(self, vocab_size: int, rng: np.random.Generator, dim: int = 64, layers: int = 2,
                 heads: int = 2, seq_len: int = SEQ_LEN):
        self.tok = Embedding(vocab_size, dim, rng, std=0.5)
        self.pos = Embedding(seq_len, dim, rng, std=0.1)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(layers)]
        self.ln_f = LayerNorm(dim)
        self.dim = dim
        self.seq_len = seq_len

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.seq_len:
            raise T.ShapeError(f"text encoder: expected sequence length {self.seq_len}, got {ids.shape}")
        x = self.tok(ids) + self.pos(np.arange(self.seq_len))
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


@dataclass
class TokenEmbeddingSequence:
    """Encoder output for one prompt, ``(L, D)``, plus name-slot positions."""

    embeddings: np.ndarray
    name_slot_positions: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.name_slot_positions is not None:
            p = self.name_slot_positions
            if not (0 <= p[0] and p[-1] < len(self.embeddings) and p[1] == p[0] + 1 and p[2] == p[1] + 1):
                raise ValueError(f"invalid name slot positions {p}")


def encode(encoder: TextEncoder, tokens: Tokens) -> TokenEmbeddingSequence:
    with no_grad():
        emb = encoder(tokens.ids[None]).data[0]
    return TokenEmbeddingSequence(emb, tokens.slot_positions)


def encode_prompt(encoder: TextEncoder, prompt: str, vocab: Vocabulary = VOCAB) -> TokenEmbeddingSequence:
    return encode(encoder, tokenize(prompt, vocab))


class MissingSlotsError(ValueError):
    pass


def splice_name_embeddings(seq: TokenEmbeddingSequence, rows) -> TokenEmbeddingSequence:
    """Replace the three name-slot rows of ``seq`` with ``rows`` (3, D)."""
    if seq.name_slot_positions is None:
        raise MissingSlotsError("sequence has no name slot positions")
    rows = np.asarray(rows)
    if rows.shape != (3, seq.embeddings.shape[1]):
        raise T.ShapeError(f"splice: expected rows of shape (3, {seq.embeddings.shape[1]}), got {rows.shape}")
    out = seq.embeddings.copy()
    p0 = seq.name_slot_positions[0]
    out[p0:p0 + 3] = rows
    return TokenEmbeddingSequence(out, seq.name_slot_positions)


def splice_tensor(context: Tensor, rows: Tensor, slot_start: int) -> Tensor:
    """Differentiable batched splice: ``context`` (N, L, D), ``rows`` (N, 3, D)."""
    parts = []
    if slot_start > 0:
        parts.append(context[:, :slot_start])
    parts.append(rows)
    if slot_start + 3 < context.shape[1]:
        parts.append(context[:, slot_start + 3:])
    return T.concat(parts, axis=1)


@dataclass
class MeanNameEmbedding:
    vector: np.ndarray
    norm: float

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "MeanNameEmbedding":
        vector = np.asarray(vector)
        norm = float(np.sqrt(np.sum(vector * vector, axis=-1)))
        if not norm > 0:
            raise ValueError("mean name embedding has zero norm")
        return cls(np.asarray(vector), norm)


def name_embeddings(encoder: TextEncoder, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Contextual output at the name position of ``"a photo of {name}"`` for every name token."""
    template = tokenize(NAME_TEMPLATE.format(name=vocab.tokens[vocab.name_range.start]), vocab)
    pos = template.length - 1
    ids = np.repeat(template.ids[None], len(vocab.name_range), axis=0)
    ids[:, pos] = vocab.name_ids
    with no_grad():
        out = encoder(ids).data
    return out[:, pos, :]


def mean_name_embedding(encoder: TextEncoder, vocab: Vocabulary = VOCAB) -> MeanNameEmbedding:
    return MeanNameEmbedding.from_vector(name_embeddings(encoder, vocab).mean(axis=0))
