"""Fixed vocabulary, tokenizer and the caption grammar parser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEQ_LEN = 16
N_NAMES = 128
PAD, START = "<pad>", "<start>"
PLACEHOLDER = "<id>"
SLOT_TOKENS = ("<id_0>", "<id_1>", "<id_2>")
GRAMMAR_WORDS = (
    "a", "photo", "sketch", "of", "person", "with", "hat", "on",
    "red", "green", "blue", "gray", "background", "full", "body",
)
NAME_TOKENS = tuple(f"name{i:03d}" for i in range(N_NAMES))


class Vocabulary:
    """Ordered token list: specials, grammar words, slot tokens, then names.

    Name tokens occupy the contiguous id range ``name_range``.
    """

    def __init__(self, tokens=None):
        tokens = list(tokens) if tokens is not None else [
            PAD, START, *GRAMMAR_WORDS, *SLOT_TOKENS, *NAME_TOKENS,
        ]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        names = [self.index[t] for t in tokens if t.startswith("name")]
        if names != list(range(names[0], names[0] + len(names))):
            raise ValueError("name tokens must form a contiguous range")
        self.name_range = range(names[0], names[-1] + 1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def start_id(self) -> int:
        return self.index[START]

    @property
    def slot_ids(self) -> tuple[int, int, int]:
        return tuple(self.index[t] for t in SLOT_TOKENS)

    @property
    def name_ids(self) -> np.ndarray:
        return np.arange(self.name_range.start, self.name_range.stop)

    def to_text(self) -> str:
        return "\n".join(self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls(text.split("\n"))


VOCAB = Vocabulary()


class UnknownWordError(ValueError):
    pass


@dataclass(frozen=True)
class Tokens:
    ids: np.ndarray
    length: int
    slot_positions: tuple[int, int, int] | None = None

    def __eq__(self, other):
        return (isinstance(other, Tokens) and self.length == other.length
                and self.slot_positions == other.slot_positions
                and np.array_equal(self.ids, other.ids))

    def __hash__(self):
        return hash((self.ids.tobytes(), self.length, self.slot_positions))


def tokenize(prompt: str, vocab: Vocabulary = VOCAB, seq_len: int = SEQ_LEN) -> Tokens:
    """Map a whitespace-separated prompt to a fixed-length id array.

    ``<id>`` expands to the three reserved slot tokens; their positions are
    recorded in ``slot_positions``.  Longer prompts are truncated.
    """
    ids = [vocab.start_id]
    slots = None
    for word in prompt.split():
        if word == PLACEHOLDER:
            slots = (len(ids), len(ids) + 1, len(ids) + 2)
            ids.extend(vocab.slot_ids)
        elif word in vocab.index and word not in (PAD, START):
            ids.append(vocab.index[word])
        else:
            raise UnknownWordError(f"unknown word {word!r} in prompt {prompt!r}")
    length = min(len(ids), seq_len)
    if slots is not None and slots[-1] >= seq_len:
        slots = None
    out = np.full(seq_len, vocab.pad_id, dtype=np.int64)
    out[:length] = ids[:length]
    return Tokens(out, length, slots)


def detokenize(tokens: Tokens | np.ndarray, vocab: Vocabulary = VOCAB) -> str:
    if isinstance(tokens, Tokens):
        ids = tokens.ids[:tokens.length]
    else:
        ids = [i for i in np.asarray(tokens) if i != vocab.pad_id]
    words = []
    slot_ids = vocab.slot_ids
    for i in ids:
        i = int(i)
        if i == vocab.start_id:
            continue
        if i == slot_ids[0]:
            words.append(PLACEHOLDER)
        elif i in slot_ids:
            continue
        else:
            words.append(vocab.tokens[i])
    return " ".join(words)
