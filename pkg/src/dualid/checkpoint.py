"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"UIDC" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u8 dtype code (1=f32, 2=f64)
               | u32 rank | u64 dim * rank | row-major payload
    u64 checksum (blake2b-64 over the concatenated payload bytes)

Non-numeric metadata (vocabulary, JSON config, frozen flags) travels as
float32 vectors of UTF-8 byte values under names starting with ``meta/``,
so only the two numeric dtype codes ever appear on disk.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UIDC"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
META_PREFIX = "meta/"


class CheckpointError(ValueError):
    pass


def _checksum(payloads) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return h.digest()


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    """Write ``tensors`` (plus text ``meta``) to ``path``; entry order is sorted by name."""
    entries = {name: np.asarray(arr) for name, arr in tensors.items()}
    for key, text in (meta or {}).items():
        entries[META_PREFIX + key] = encode_text(text)
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    payloads = []
    for name in sorted(entries):
        arr = entries[name]
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(payload)
        payloads.append(payload)
    out.append(_checksum(payloads))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(out))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Return ``(tensors, meta)``; raises :class:`CheckpointError` on any corruption."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors, meta, payloads = {}, {}, []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = CODE_DTYPES[code]
        payload = take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        payloads.append(payload)
        arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = decode_text(arr)
        else:
            tensors[name] = arr
    if take(8) != _checksum(payloads):
        raise CheckpointError(f"{path}: checksum mismatch")
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return tensors, meta


def save_module(path, module, meta: dict | None = None, prefix: str = "") -> Path:
    """Save a module's parameters; ``meta`` values that are not strings are JSON-encoded."""
    tensors = {prefix + k: v for k, v in module.state_dict().items()}
    frozen = sorted(prefix + n for n, p in module.named_parameters() if p.frozen)
    text = {k: v if isinstance(v, str) else json.dumps(v, sort_keys=True) for k, v in (meta or {}).items()}
    text.setdefault("frozen", json.dumps(frozen))
    return save_checkpoint(path, tensors, text)
