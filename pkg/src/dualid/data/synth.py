"""Procedural 32x32 faces with separate identity and composition factors.

Identity controls only what is drawn inside the head (skin, eyes, mouth,
hair, head aspect).  Composition controls everything else: background
colour, hat, photo/sketch style, horizontal pose shift and framing.  Scene
framing shrinks the head and adds a body and a striped background.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from ..text.vocab import VOCAB, Tokens, UnknownWordError, Vocabulary, tokenize

IMAGE_SIZE = 32

BACKGROUNDS = ("red", "green", "blue", "gray")
ACCESSORIES = ("none", "hat")
STYLES = ("photo", "sketch")
FRAMINGS = ("portrait", "scene")
N_HAIR_STYLES = 4

BACKGROUND_RGB = {
    "red": (0.80, 0.18, 0.18),
    "green": (0.20, 0.68, 0.25),
    "blue": (0.20, 0.30, 0.85),
    "gray": (0.55, 0.55, 0.55),
}
HAIR_RGB = (0.22, 0.13, 0.07)
EYE_RGB = (0.05, 0.05, 0.10)
MOUTH_RGB = (0.55, 0.08, 0.15)
HAT_RGB = (0.95, 0.80, 0.10)
BODY_RGB = (0.30, 0.30, 0.34)
SKIN_LIGHT = np.array([0.96, 0.82, 0.70])
SKIN_DARK = np.array([0.45, 0.30, 0.20])

# head box area as a fraction of the image, before clipping
PORTRAIT_HEAD_AREA = 0.75
SCENE_HEAD_AREA = 0.14

RANGES = {
    "face_aspect": (0.7, 1.3),
    "eye_spacing": (0.25, 0.45),
    "eye_size": (0.04, 0.10),
    "mouth_curve": (-1.0, 1.0),
}


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class IdentityParams:
    face_aspect: float
    eye_spacing: float
    eye_size: float
    mouth_curve: float
    skin_tone: tuple[float, float, float]
    hair_style: int
    identity_id: int = 0

    def validate(self) -> None:
        for key, (lo, hi) in RANGES.items():
            v = getattr(self, key)
            if not (lo <= v <= hi):
                raise InvalidParams(f"{key}={v} outside [{lo}, {hi}]")
        if len(self.skin_tone) != 3 or not all(0.0 <= c <= 1.0 for c in self.skin_tone):
            raise InvalidParams(f"skin_tone={self.skin_tone} must be an RGB triple in [0, 1]")
        if self.hair_style not in range(N_HAIR_STYLES):
            raise InvalidParams(f"hair_style={self.hair_style} not in 0..{N_HAIR_STYLES - 1}")

    def vector(self) -> np.ndarray:
        return np.array([self.face_aspect, self.eye_spacing, self.eye_size, self.mouth_curve,
                         *self.skin_tone, self.hair_style], dtype=np.float64)

    @classmethod
    def sample(cls, rng: np.random.Generator, identity_id: int = 0) -> "IdentityParams":
        vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in RANGES.items()}
        t = rng.uniform()
        skin = np.clip(SKIN_LIGHT + t * (SKIN_DARK - SKIN_LIGHT) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        return cls(skin_tone=tuple(float(c) for c in skin), hair_style=int(rng.integers(N_HAIR_STYLES)),
                   identity_id=identity_id, **vals)


@dataclass(frozen=True)
class CompositionParams:
    background: str = "gray"
    accessory: str = "none"
    style: str = "photo"
    pose_shift: int = 0
    framing: str = "portrait"

    def validate(self) -> None:
        for key, allowed in (("background", BACKGROUNDS), ("accessory", ACCESSORIES),
                             ("style", STYLES), ("framing", FRAMINGS)):
            if getattr(self, key) not in allowed:
                raise InvalidParams(f"{key}={getattr(self, key)!r} not in {allowed}")
        if not (-4 <= self.pose_shift <= 4) or int(self.pose_shift) != self.pose_shift:
            raise InvalidParams(f"pose_shift={self.pose_shift} must be an integer in [-4, 4]")

    def attributes(self) -> tuple[str, str, str]:
        return self.background, self.style, self.accessory

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "CompositionParams":
        return cls(background=BACKGROUNDS[rng.integers(4)], accessory=ACCESSORIES[rng.integers(2)],
                   style=STYLES[rng.integers(2)], pose_shift=int(rng.integers(-4, 5)),
                   framing=FRAMINGS[rng.integers(2)])


def all_compositions(pose_shift: int = 0) -> list[CompositionParams]:
    """Every (background, accessory, style, framing) combination."""
    return [CompositionParams(b, a, s, pose_shift, f)
            for b, a, s, f in itertools.product(BACKGROUNDS, ACCESSORIES, STYLES, FRAMINGS)]


@dataclass
class FaceImage:
    pixels: np.ndarray
    identity: IdentityParams
    composition: CompositionParams
    caption: Tokens
    head_box: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def face_area_fraction(self) -> float:
        y0, y1, x0, x1 = self.head_box
        return (y1 - y0) * (x1 - x0) / float(IMAGE_SIZE * IMAGE_SIZE)


# -- rendering --------------------------------------------------------------

def head_geometry(identity: IdentityParams, composition: CompositionParams):
    """Centre and semi-axes (cx, cy, a, b) of the head ellipse in pixels."""
    frac = PORTRAIT_HEAD_AREA if composition.framing == "portrait" else SCENE_HEAD_AREA
    ab = frac * IMAGE_SIZE * IMAGE_SIZE / 4.0
    a = np.sqrt(ab / identity.face_aspect)
    b = np.sqrt(ab * identity.face_aspect)
    cx = IMAGE_SIZE / 2 + composition.pose_shift
    cy = IMAGE_SIZE / 2 if composition.framing == "portrait" else 11.0
    return cx, cy, a, b


def head_box(identity: IdentityParams, composition: CompositionParams) -> tuple[int, int, int, int]:
    """Integer (y0, y1, x0, x1) bounding box of the head, clipped to the image."""
    cx, cy, a, b = head_geometry(identity, composition)
    y0 = int(np.clip(np.floor(cy - b), 0, IMAGE_SIZE))
    y1 = int(np.clip(np.ceil(cy + b), 0, IMAGE_SIZE))
    x0 = int(np.clip(np.floor(cx - a), 0, IMAGE_SIZE))
    x1 = int(np.clip(np.ceil(cx + a), 0, IMAGE_SIZE))
    return y0, y1, x0, x1


def _grid():
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    return ys, xs


def _paint(img: np.ndarray, coverage: np.ndarray, rgb) -> None:
    c = coverage[..., None]
    img *= 1.0 - c
    img += c * np.asarray(rgb)


def head_masks(identity: IdentityParams, composition: CompositionParams) -> dict[str, np.ndarray]:
    """Soft coverage maps of the head and of the hat."""
    ys, xs = _grid()
    cx, cy, a, b = head_geometry(identity, composition)
    rn = np.sqrt(((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2)
    head = np.clip(0.5 - (rn - 1.0) * min(a, b), 0.0, 1.0)
    hat = np.zeros_like(head)
    if composition.accessory == "hat":
        crown = (np.abs(xs - cx) < 1.0 * a) & (ys > cy - 1.25 * b) & (ys < cy - 0.5 * b)
        brim = (np.abs(xs - cx) < 1.3 * a) & (ys >= cy - 0.62 * b) & (ys < cy - 0.45 * b)
        hat = (crown | brim).astype(np.float64)
    return {"head": head, "hat": hat}


def _render_photo(identity: IdentityParams, composition: CompositionParams) -> np.ndarray:
    ys, xs = _grid()
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:] = BACKGROUND_RGB[composition.background]
    cx, cy, a, b = head_geometry(identity, composition)
    if composition.framing == "scene":
        stripes = 0.88 + 0.12 * (np.floor((xs + ys) / 4.0) % 2)
        img *= stripes[..., None]
        half = np.clip(1.3 * a + (ys - cy - b) * 0.35, 0, None)
        body = ((ys > cy + 0.8 * b) & (np.abs(xs - cx) < half)).astype(np.float64)
        _paint(img, body, BODY_RGB)

    masks = head_masks(identity, composition)
    head = masks["head"]
    face = np.empty_like(img)
    face[:] = identity.skin_tone
    # hair
    if identity.hair_style:
        top = ys < cy - (0.45, 0.2, 0.35)[identity.hair_style - 1] * b
        if identity.hair_style == 2:
            hair = top | ((np.abs(xs - cx) > 0.72 * a) & (ys < cy + 0.1 * b))
        elif identity.hair_style == 3:
            hair = top & (xs < cx + 0.3 * a) | (ys < cy - 0.7 * b)
        else:
            hair = top
        _paint(face, hair.astype(np.float64), HAIR_RGB)
    # eyes
    r = max(identity.eye_size * 2 * a, 0.6)
    ey = cy - 0.15 * b
    for sx in (-1.0, 1.0):
        ex = cx + sx * identity.eye_spacing * a
        d = np.sqrt((xs - ex) ** 2 + (ys - ey) ** 2)
        _paint(face, np.clip(r - d + 0.5, 0.0, 1.0), EYE_RGB)
    # mouth: parabola, corners raised for positive curve
    half_w = 0.42 * a
    u = np.clip((xs - cx) / half_w, -1.0, 1.0)
    my = cy + 0.45 * b + identity.mouth_curve * 0.14 * b * (1.0 - u**2) - 0.07 * b * identity.mouth_curve
    thick = max(0.06 * b, 0.7)
    mouth = np.clip(thick - np.abs(ys - my) + 0.5, 0.0, 1.0) * (np.abs(xs - cx) < half_w)
    _paint(face, mouth, MOUTH_RGB)

    img = img * (1.0 - head[..., None]) + face * head[..., None]
    _paint(img, masks["hat"], HAT_RGB)
    return img


def _sketch(photo: np.ndarray) -> np.ndarray:
    """Wash colours towards white and darken edges of the luma channel."""
    luma = photo @ np.array([0.299, 0.587, 0.114])
    p = np.pad(luma, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    edge = np.sqrt(gx**2 + gy**2)
    return np.clip(0.55 + 0.45 * photo - 1.6 * edge[..., None], 0.0, 1.0)


def render_face(identity: IdentityParams, composition: CompositionParams,
                vocab: Vocabulary = VOCAB) -> FaceImage:
    """Deterministically render one face; raises :class:`InvalidParams`."""
    identity.validate()
    composition.validate()
    img = _render_photo(identity, composition)
    if composition.style == "sketch":
        img = _sketch(img)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return FaceImage(pixels, identity, composition, caption_for(composition, vocab=vocab),
                     head_box(identity, composition))


# -- captions ---------------------------------------------------------------

MINIMAL_CAPTION = "a photo of a person"


def caption_text(composition: CompositionParams, minimal: bool = False, subject: str = "a person") -> str:
    if minimal:
        return MINIMAL_CAPTION if subject == "a person" else f"a photo of {subject}"
    words = [f"a {composition.style} of {subject}"]
    if composition.accessory == "hat":
        words.append("with a hat")
    words.append(f"on a {composition.background} background")
    if composition.framing == "scene":
        words.append("full body")
    return " ".join(words)


def caption_for(composition: CompositionParams, minimal: bool = False,
                vocab: Vocabulary = VOCAB, subject: str = "a person") -> Tokens:
    return tokenize(caption_text(composition, minimal, subject), vocab)


def parse_caption(text: str) -> tuple[CompositionParams, str]:
    """Invert :func:`caption_text`: returns the composition and the subject phrase.

    ``pose_shift`` is not part of the grammar and comes back as 0.
    """
    w = text.split()
    try:
        if w[0] != "a" or w[2] != "of":
            raise ValueError
        style = w[1]
        rest = w[3:]
        on = len(rest) - 1 - rest[::-1].index("on") if "on" in rest else None
        if on is None:
            raise ValueError
        head, tail = rest[:on], rest[on:]
        accessory = "none"
        if head[-3:] == ["with", "a", "hat"]:
            accessory, head = "hat", head[:-3]
        subject = " ".join(head)
        if tail[:2] != ["on", "a"] or tail[3] != "background":
            raise ValueError
        background = tail[2]
        extra = tail[4:]
        if extra == ["full", "body"]:
            framing = "scene"
        elif not extra:
            framing = "portrait"
        else:
            raise ValueError
    except (ValueError, IndexError):
        raise UnknownWordError(f"not a grammar sentence: {text!r}") from None
    comp = CompositionParams(background, accessory, style, 0, framing)
    comp.validate()
    return comp, subject


def personalized_prompt(composition: CompositionParams) -> str:
    return caption_text(composition, subject="<id>")


# -- datasets ---------------------------------------------------------------

PORTRAIT_COMPOSITION = CompositionParams(background="gray", accessory="none", style="photo",
                                         pose_shift=0, framing="portrait")


@dataclass
class SplitSpec:
    """``kind`` is ``"compositional"`` (all composition factors random) or
    ``"portrait"`` (portrait framing, photo style, no hat, fixed background;
    only the pose shift varies).  ``heldout_fraction`` of the identities are
    reserved and never rendered into the returned images."""

    kind: str = "compositional"
    heldout_fraction: float = 0.0
    portrait_background: str = "gray"


@dataclass
class Dataset:
    images: np.ndarray
    identity_ids: np.ndarray
    compositions: list[CompositionParams]
    captions: np.ndarray
    identities: dict[int, IdentityParams]
    train_identities: list[int]
    heldout_identities: list[int]
    kind: str = "compositional"
    head_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.identity_ids[idx], [self.compositions[i] for i in idx],
                       self.captions[idx], self.identities, self.train_identities,
                       self.heldout_identities, self.kind,
                       [self.head_boxes[i] for i in idx] if self.head_boxes else [])

    def attribute_labels(self) -> dict[str, np.ndarray]:
        return {
            "background": np.array([BACKGROUNDS.index(c.background) for c in self.compositions]),
            "style": np.array([STYLES.index(c.style) for c in self.compositions]),
            "accessory": np.array([ACCESSORIES.index(c.accessory) for c in self.compositions]),
            "framing": np.array([FRAMINGS.index(c.framing) for c in self.compositions]),
        }


def sample_identities(n: int, rng: np.random.Generator, start_id: int = 0) -> dict[int, IdentityParams]:
    return {start_id + i: IdentityParams.sample(rng, start_id + i) for i in range(n)}


def sample_dataset(n_identities: int, images_per_identity: int, split_spec: SplitSpec | None = None,
                   seed: int = 0, vocab: Vocabulary = VOCAB) -> Dataset:
    """Draw identities uniformly and render ``images_per_identity`` of each training identity."""
    if n_identities < 2:
        raise InvalidParams("n_identities must be >= 2")
    if images_per_identity < 1:
        raise InvalidParams("images_per_identity must be >= 1")
    spec = split_spec or SplitSpec()
    if spec.kind not in ("compositional", "portrait"):
        raise InvalidParams(f"unknown split kind {spec.kind!r}")
    if not 0.0 <= spec.heldout_fraction < 1.0:
        raise InvalidParams("heldout_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    identities = sample_identities(n_identities, rng)
    order = rng.permutation(n_identities)
    n_held = int(round(spec.heldout_fraction * n_identities))
    heldout = sorted(int(i) for i in order[:n_held])
    train = sorted(int(i) for i in order[n_held:])

    images, ids, comps, caps, boxes = [], [], [], [], []
    for ident in train:
        for _ in range(images_per_identity):
            if spec.kind == "portrait":
                comp = CompositionParams(spec.portrait_background, "none", "photo",
                                         int(rng.integers(-4, 5)), "portrait")
            else:
                comp = CompositionParams.sample(rng)
            face = render_face(identities[ident], comp, vocab)
            images.append(face.pixels)
            ids.append(ident)
            comps.append(comp)
            caps.append(face.caption.ids)
            boxes.append(face.head_box)
    return Dataset(np.stack(images), np.array(ids), comps, np.stack(caps), identities, train, heldout,
                   spec.kind, boxes)


def render_set(identities: dict[int, IdentityParams], ids, compositions) -> np.ndarray:
    """Render ``identities[ids[i]]`` with ``compositions[i]``; returns (N, 32, 32, 3)."""
    return np.stack([render_face(identities[int(i)], c).pixels for i, c in zip(ids, compositions)])


def composition_dict(c: CompositionParams) -> dict:
    return asdict(c)
