"""Procedural identity-bearing avatars with analytic masks.

Every image is a pure function of an (IdentitySpec, StyleSpec) pair. The
face is a disc whose colour, eyes and mouth come from the identity; the
background, torso, placement, scale and accessory come from the style.
Masks are computed from the same geometry as the pixels.
"""
from __future__ import annotations

import colorsys
import copy
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CANVAS = 24
CROP = 12
N_BINS = 8
MASK_FILL = 0.5
ACCESSORIES = ("none", "hat", "glasses")

SKIN_TONES = np.array([
    (0.98, 0.87, 0.77), (0.94, 0.78, 0.64), (0.87, 0.67, 0.51), (0.78, 0.56, 0.40),
    (0.65, 0.45, 0.30), (0.52, 0.35, 0.22), (0.40, 0.26, 0.16), (0.28, 0.18, 0.11),
])
EYE_COLOR = np.array((0.08, 0.08, 0.12))
MOUTH_COLOR = np.array((0.60, 0.08, 0.10))
HAT_COLOR = np.array((0.15, 0.15, 0.35))
GLASSES_COLOR = np.array((0.05, 0.05, 0.05))

# token layout: 0 = padding, then one block of N_BINS per quantised field,
# then one token per accessory
PAD = 0
_FIELDS = ("bg_hue", "face_x", "face_y", "face_scale")
VOCAB_SIZE = 1 + N_BINS * len(_FIELDS) + len(ACCESSORIES)
N_STYLE_TOKENS = len(_FIELDS) + 1


@dataclass(frozen=True)
class IdentitySpec:
    face_hue: float
    eye_spacing: float
    eye_size: float
    mouth_curve: float
    skin_tone: int

    def __post_init__(self):
        if not 0.0 <= self.face_hue < 1.0:
            raise ValueError(f"face_hue out of range: {self.face_hue}")
        if not 0.2 <= self.eye_spacing <= 0.5:
            raise ValueError(f"eye_spacing out of range: {self.eye_spacing}")
        if not 0.05 <= self.eye_size <= 0.15:
            raise ValueError(f"eye_size out of range: {self.eye_size}")
        if not -1.0 <= self.mouth_curve <= 1.0:
            raise ValueError(f"mouth_curve out of range: {self.mouth_curve}")
        if not 0 <= int(self.skin_tone) <= 7:
            raise ValueError(f"skin_tone out of range: {self.skin_tone}")

    @property
    def face_color(self) -> np.ndarray:
        tint = np.array(colorsys.hsv_to_rgb(self.face_hue, 0.8, 0.9))
        return 0.65 * SKIN_TONES[int(self.skin_tone)] + 0.35 * tint


def _quantize(v: float, lo: float, hi: float) -> int:
    return min(int((v - lo) / (hi - lo) * N_BINS), N_BINS - 1)


@dataclass(frozen=True)
class StyleSpec:
    bg_hue: float
    face_center: tuple[float, float]
    face_scale: float
    accessory: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.bg_hue < 1.0:
            raise ValueError(f"bg_hue out of range: {self.bg_hue}")
        x, y = self.face_center
        if not (0.25 <= x <= 0.75 and 0.25 <= y <= 0.75):
            raise ValueError(f"face_center out of range: {self.face_center}")
        if not 0.25 <= self.face_scale <= 0.45:
            raise ValueError(f"face_scale out of range: {self.face_scale}")
        if self.accessory not in ACCESSORIES:
            raise ValueError(f"unknown accessory {self.accessory!r}")
        object.__setattr__(self, "face_center", (float(x), float(y)))

    @property
    def style_tokens(self) -> list[int]:
        x, y = self.face_center
        bins = [
            _quantize(self.bg_hue, 0.0, 1.0),
            _quantize(x, 0.25, 0.75),
            _quantize(y, 0.25, 0.75),
            _quantize(self.face_scale, 0.25, 0.45),
        ]
        toks = [1 + i * N_BINS + b for i, b in enumerate(bins)]
        toks.append(1 + N_BINS * len(_FIELDS) + ACCESSORIES.index(self.accessory))
        return toks

    def geometry(self, canvas: int = CANVAS) -> tuple[float, float, float]:
        """Face centre (px) and radius (px)."""
        return self.face_center[0] * canvas, self.face_center[1] * canvas, self.face_scale * canvas / 2


CANONICAL_STYLE = StyleSpec(bg_hue=0.0, face_center=(0.5, 0.5), face_scale=0.4, accessory="none")


@dataclass
class AvatarSample:
    image: np.ndarray                   # [3, H, W] float32 in [0, 1]
    face_mask: np.ndarray               # [H, W] bool
    face_crop: np.ndarray | None        # [3, CROP, CROP] float32, None for face-free samples
    instance_masks: list[np.ndarray]
    identities: list[IdentitySpec]
    style: StyleSpec
    labels: list[int] = field(default_factory=list)
    styles: list[StyleSpec] = field(default_factory=list)

    @property
    def is_human(self) -> bool:
        return bool(self.identities)

    @property
    def style_tokens(self) -> list[int]:
        return self.style.style_tokens


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

def _grid(canvas: int = CANVAS) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    return xs, ys


def disc_mask(cx: float, cy: float, r: float, canvas: int = CANVAS) -> np.ndarray:
    xs, ys = _grid(canvas)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def face_mask_for_style(style: StyleSpec, canvas: int = CANVAS) -> np.ndarray:
    return disc_mask(*style.geometry(canvas), canvas=canvas)


def _background(style: StyleSpec, canvas: int) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(style.bg_hue, 0.45, 0.8))
    _, ys = _grid(canvas)
    shade = 0.9 + 0.1 * (ys / canvas)            # mild vertical gradient
    return (base[:, None, None] * shade[None]).astype(np.float64)


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img[:, mask] = np.asarray(color, dtype=np.float64)[:, None]


def _draw_torso(img: np.ndarray, style: StyleSpec) -> None:
    cx, cy, r = style.geometry(img.shape[1])
    xs, ys = _grid(img.shape[1])
    torso = (ys >= cy + 0.8 * r) & (((xs - cx) / (1.6 * r)) ** 2 + ((ys - (cy + 2.6 * r)) / (1.9 * r)) ** 2 <= 1)
    _paint(img, torso, colorsys.hsv_to_rgb((style.bg_hue + 0.5) % 1.0, 0.5, 0.45))


def _draw_hat(img: np.ndarray, style: StyleSpec) -> None:
    cx, cy, r = style.geometry(img.shape[1])
    xs, ys = _grid(img.shape[1])
    hat = (ys >= cy - 1.45 * r) & (ys <= cy - 0.7 * r) & (np.abs(xs - cx) <= 0.85 * r)
    _paint(img, hat, HAT_COLOR)


def _draw_face(img: np.ndarray, identity: IdentitySpec, style: StyleSpec) -> np.ndarray:
    canvas = img.shape[1]
    cx, cy, r = style.geometry(canvas)
    xs, ys = _grid(canvas)
    face = disc_mask(cx, cy, r, canvas)
    _paint(img, face, identity.face_color)

    width = 2 * r
    dx = identity.eye_spacing * width / 2
    eye_r = 0.5 * identity.eye_size * width + 0.4
    eye_y = cy - 0.2 * r
    for ex in (cx - dx, cx + dx):
        _paint(img, face & ((xs - ex) ** 2 + (ys - eye_y) ** 2 <= eye_r ** 2), EYE_COLOR)

    half = 0.5 * r
    u = np.clip((xs - cx) / half, -1.0, 1.0)
    curve_y = cy + 0.45 * r + identity.mouth_curve * 0.25 * r * (1.0 - u * u)
    mouth = face & (np.abs(xs - cx) <= half) & (np.abs(ys - curve_y) <= 0.5)
    _paint(img, mouth, MOUTH_COLOR)

    if style.accessory == "glasses":
        bar = face & (np.abs(ys - (cy - 0.5 * r)) <= 0.5) & (np.abs(xs - cx) <= 0.8 * r)
        _paint(img, bar, GLASSES_COLOR)
    return face


def crop_face(image: np.ndarray, mask: np.ndarray, size: int = CROP) -> np.ndarray:
    """Nearest-neighbour resample of the mask's bounding box; off-mask pixels set to gray."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty face mask")
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    iy = y0 + ((np.arange(size) + 0.5) * (y1 - y0) / size).astype(int)
    ix = x0 + ((np.arange(size) + 0.5) * (x1 - x0) / size).astype(int)
    crop = image[:, iy[:, None], ix[None, :]].copy()
    m = mask[iy[:, None], ix[None, :]]
    crop[:, ~m] = MASK_FILL
    return crop.astype(np.float32)


def render_avatar(identity: IdentitySpec, style: StyleSpec, canvas: int = CANVAS) -> AvatarSample:
    img = _background(style, canvas)
    _draw_torso(img, style)
    if style.accessory == "hat":
        _draw_hat(img, style)
    face = _draw_face(img, identity, style)
    image = np.clip(img, 0.0, 1.0).astype(np.float32)
    return AvatarSample(image=image, face_mask=face, face_crop=crop_face(image, face),
                        instance_masks=[face.copy()], identities=[identity], style=style,
                        styles=[style])


def render_pattern(style: StyleSpec, canvas: int = CANVAS) -> AvatarSample:
    """Face-free sample (stripes over the style background)."""
    img = _background(style, canvas)
    xs, ys = _grid(canvas)
    period = 3 + 6 * style.face_scale
    stripes = np.sin((xs * np.cos(np.pi * style.face_center[0]) + ys * np.sin(np.pi * style.face_center[1]))
                     * 2 * np.pi / period) > 0.3
    _paint(img, stripes, colorsys.hsv_to_rgb((style.bg_hue + 0.33) % 1.0, 0.6, 0.55))
    empty = np.zeros((canvas, canvas), dtype=bool)
    return AvatarSample(image=np.clip(img, 0, 1).astype(np.float32), face_mask=empty, face_crop=None,
                        instance_masks=[], identities=[], style=style, styles=[style])


def make_training_pair(sample: AvatarSample) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """(style_image, face_crop, target): the style image has its face replaced by gray."""
    if len(sample.identities) > 1:
        raise ValueError("training pairs need a single-identity sample")
    style_image = sample.image.copy()
    style_image[:, sample.face_mask] = MASK_FILL
    return style_image, sample.face_crop, sample.image.copy()


def make_multi_human(identities: Sequence[IdentitySpec], styles: Sequence[StyleSpec],
                     canvas: int = CANVAS) -> AvatarSample:
    """Composite of 2-3 people on the background of ``styles[0]``."""
    n = len(identities)
    if not 2 <= n <= 3:
        raise ValueError(f"multi-human composites take 2 or 3 identities, got {n}")
    if len(styles) != n:
        raise ValueError("one style per identity required")
    geo = [s.geometry(canvas) for s in styles]
    for i in range(n):
        for j in range(i + 1, n):
            (xi, yi, ri), (xj, yj, rj) = geo[i], geo[j]
            if np.hypot(xi - xj, yi - yj) <= ri + rj + 1.0:
                raise ValueError(f"face placements {i} and {j} overlap")
    img = _background(styles[0], canvas)
    for s in styles:
        _draw_torso(img, s)
    for s in styles:
        if s.accessory == "hat":
            _draw_hat(img, s)
    masks = [_draw_face(img, ident, s) for ident, s in zip(identities, styles)]
    image = np.clip(img, 0, 1).astype(np.float32)
    return AvatarSample(image=image, face_mask=masks[0].copy(), face_crop=crop_face(image, masks[0]),
                        instance_masks=masks, identities=list(identities), style=styles[0],
                        styles=list(styles))


# ---------------------------------------------------------------------------
# identity pool + stream
# ---------------------------------------------------------------------------

def random_identity(rng: np.random.Generator) -> IdentitySpec:
    return IdentitySpec(face_hue=float(rng.uniform(0, 1)), eye_spacing=float(rng.uniform(0.2, 0.5)),
                        eye_size=float(rng.uniform(0.05, 0.15)), mouth_curve=float(rng.uniform(-1, 1)),
                        skin_tone=int(rng.integers(0, 8)))


def random_style(rng: np.random.Generator) -> StyleSpec:
    return StyleSpec(bg_hue=float(rng.uniform(0, 1)),
                     face_center=(float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.25, 0.75))),
                     face_scale=float(rng.uniform(0.25, 0.45)),
                     accessory=ACCESSORIES[int(rng.integers(0, len(ACCESSORIES)))])


def identity_pool(seed: int, size: int, min_color_dist: float = 0.12) -> list[IdentitySpec]:
    """``size`` identities with pairwise face colours at least ``min_color_dist`` apart (RGB)."""
    rng = np.random.default_rng([seed, 0])
    pool: list[IdentitySpec] = []
    tries = 0
    while len(pool) < size:
        cand = random_identity(rng)
        tries += 1
        if all(np.linalg.norm(cand.face_color - p.face_color) >= min_color_dist for p in pool):
            pool.append(cand)
        elif tries > 100_000:
            raise RuntimeError("could not draw a sufficiently diverse identity pool")
    return pool


def split_pool(seed: int, num_identities: int, num_heldout: int) -> tuple[list[IdentitySpec], list[IdentitySpec]]:
    pool = identity_pool(seed, num_identities + num_heldout)
    return pool[:num_identities], pool[num_identities:]


class AvatarStream:
    """Reproducible iterator of single-identity samples.

    ``copy()`` forks the cursor: the fork yields exactly what the original
    would have yielded from that point on.
    """

    def __init__(self, seed: int, n: int, num_identities: int, num_heldout: int = 4,
                 nonhuman_fraction: float = 0.0):
        if n <= 0:
            raise ValueError(f"stream length must be positive, got {n}")
        if num_identities < 2:
            raise ValueError(f"need at least 2 identities, got {num_identities}")
        if not 0.0 <= nonhuman_fraction < 1.0:
            raise ValueError(f"nonhuman_fraction must lie in [0, 1), got {nonhuman_fraction}")
        self.seed, self.n = seed, n
        self.num_identities = num_identities
        self.nonhuman_fraction = nonhuman_fraction
        self.pool, self.heldout = split_pool(seed, num_identities, num_heldout)
        self._rng = np.random.default_rng([seed, 1])
        self._i = 0

    def __iter__(self) -> Iterator[AvatarSample]:
        return self

    def __next__(self) -> AvatarSample:
        if self._i >= self.n:
            raise StopIteration
        self._i += 1
        rng = self._rng
        label = int(rng.integers(0, self.num_identities))
        style = random_style(rng)
        nonhuman = self.nonhuman_fraction > 0 and rng.uniform() < self.nonhuman_fraction
        if nonhuman:
            return render_pattern(style)
        sample = render_avatar(self.pool[label], style)
        sample.labels = [label]
        return sample

    def __len__(self) -> int:
        return self.n - self._i

    def copy(self) -> "AvatarStream":
        return copy.deepcopy(self)


def dataset_stream(seed: int, n: int, num_identities: int, num_heldout: int = 4,
                   nonhuman_fraction: float = 0.0) -> AvatarStream:
    return AvatarStream(seed, n, num_identities, num_heldout, nonhuman_fraction)
