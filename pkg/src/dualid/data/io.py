"""Binary PPM (P6) images and the tab-separated dataset manifest."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..text.vocab import VOCAB, detokenize, tokenize
from .synth import CompositionParams, Dataset

MANIFEST_FIELDS = ("identity_id", "background", "accessory", "style", "pose_shift", "framing",
                   "caption", "path")


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` float image in [0, 1] as 8-bit P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3), got {pixels.shape}")
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _tokens(buf: bytes, pos: int, count: int):
    out = []
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a P6 file (max value 255) into float32 ``(H, W, 3)`` in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 0, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    data = np.frombuffer(buf[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).astype(np.float32) / 255.0)


def export_dataset(dataset: Dataset, directory, vocab=VOCAB) -> Path:
    """Write every image as PPM plus ``manifest.tsv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i, (img, ident, comp, cap) in enumerate(zip(dataset.images, dataset.identity_ids,
                                                        dataset.compositions, dataset.captions)):
            rel = f"images/{i:06d}.ppm"
            write_ppm(directory / rel, img)
            writer.writerow([int(ident), comp.background, comp.accessory, comp.style, comp.pose_shift,
                             comp.framing, detokenize(cap, vocab), rel])
    return manifest


def read_manifest(path) -> list[dict]:
    """Parse a manifest into records with typed fields and loaded pixels."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            comp = CompositionParams(row["background"], row["accessory"], row["style"],
                                     int(row["pose_shift"]), row["framing"])
            comp.validate()
            records.append({
                "identity_id": int(row["identity_id"]),
                "composition": comp,
                "caption": tokenize(row["caption"]),
                "pixels": read_ppm(path.parent / row["path"]),
                "path": row["path"],
            })
    return records
