"""Procedural labelled scenes with a photometric domain profile."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from simdet.errors import InvalidInputError
from simdet.geometry import BBox, iou
from simdet.rng import SplitMix, derive

CLASS_NAMES = ("head", "helmet", "ear-protection", "welding-mask", "bare-chest", "vest", "person")

# helmet most frequent, ear protection rarest
DEFAULT_CLASS_WEIGHTS = (0.16, 0.26, 0.04, 0.09, 0.10, 0.17, 0.18)

# (shape, rgb) per class; colours stay inside [0.2, 0.85] so brightness
# shifts survive clipping
_TEMPLATES = (
    ("ellipse", (0.80, 0.62, 0.50)),
    ("dome", (0.85, 0.80, 0.20)),
    ("ring", (0.80, 0.22, 0.25)),
    ("rect", (0.30, 0.36, 0.55)),
    ("diamond", (0.72, 0.50, 0.40)),
    ("striped", (0.85, 0.52, 0.15)),
    ("triangle", (0.22, 0.38, 0.80)),
)
_EXTRA_SHAPES = ("ellipse", "dome", "ring", "rect", "diamond", "striped", "triangle", "cross")

SIZE_RANGE = (0.12, 0.25)
MAX_OVERLAP = 0.1


@dataclass(frozen=True)
class DomainProfile:
    name: str
    brightness: float = 0.0
    noise_sigma: float = 0.0
    palette_shift: float = 0.0

    def __post_init__(self) -> None:
        if not -0.5 <= self.brightness <= 0.5:
            raise InvalidInputError(f"brightness {self.brightness} outside [-0.5, 0.5]")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise InvalidInputError(f"noise_sigma {self.noise_sigma} outside [0, 0.2]")
        if not math.isfinite(self.palette_shift):
            raise InvalidInputError("palette_shift must be finite")


VIRTUAL = DomainProfile("virtual", brightness=-0.25, noise_sigma=0.05)
REAL = DomainProfile("real", brightness=0.0, noise_sigma=0.1)
NEUTRAL = DomainProfile("neutral", brightness=0.0, noise_sigma=0.0)
PROFILES = {p.name: p for p in (VIRTUAL, REAL, NEUTRAL)}


def get_profile(name: str) -> DomainProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise InvalidInputError(f"unknown profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: list[tuple[int, BBox]]
    seed: int = 0
    meta: dict = field(default_factory=dict, repr=False)


def class_template(cls: int, style: str = "ppe") -> tuple[str, tuple[float, float, float]]:
    """Shape and base colour for a class.

    ``style="ppe"`` is the detection benchmark; ``style="aux"`` gives a
    disjoint set of shapes and colours for generic pretraining.
    """
    if style == "aux":
        hue = (cls * 0.37 + 0.11) % 1.0
        rgb = tuple(0.5 + 0.3 * math.cos(2 * math.pi * (hue - k / 3)) for k in range(3))
        return _EXTRA_SHAPES[(cls + 3) % len(_EXTRA_SHAPES)], rgb
    if cls < len(_TEMPLATES):
        return _TEMPLATES[cls]
    hue = (cls * 0.61) % 1.0
    rgb = tuple(0.5 + 0.3 * math.cos(2 * math.pi * (hue - k / 3)) for k in range(3))
    return _EXTRA_SHAPES[cls % len(_EXTRA_SHAPES)], rgb


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    y = (np.arange(h) + 0.5) / h * 2 - 1
    x = (np.arange(w) + 0.5) / w * 2 - 1
    yy, xx = np.meshgrid(y, x, indexing="ij")
    r2 = xx**2 + yy**2
    if shape == "ellipse":
        return r2 <= 1.0
    if shape == "dome":
        return (yy >= 0.2) | (xx**2 + ((yy - 0.2) / 1.2) ** 2 <= 1.0)
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.3)
    if shape == "diamond":
        return np.abs(xx) + np.abs(yy) <= 1.0
    if shape == "triangle":
        return np.abs(xx) <= (yy + 1) / 2
    if shape == "cross":
        return (np.abs(xx) <= 0.35) | (np.abs(yy) <= 0.35)
    return np.ones((h, w), dtype=bool)  # rect, striped


def _hue_rotation(degrees: float) -> np.ndarray:
    """Rotation about the grey axis; preserves the channel mean."""
    t = math.radians(degrees)
    u = np.full(3, 1 / math.sqrt(3))
    K = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return math.cos(t) * np.eye(3) + math.sin(t) * K + (1 - math.cos(t)) * np.outer(u, u)


def apply_profile(image: np.ndarray, profile: DomainProfile, rng: SplitMix) -> np.ndarray:
    img = image.astype(np.float64)
    if profile.palette_shift:
        img = img @ _hue_rotation(profile.palette_shift).T
    img = img + profile.brightness
    if profile.noise_sigma > 0:
        img = img + rng.normal(img.shape, sigma=profile.noise_sigma)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(
    seed: int,
    profile: DomainProfile,
    K: int = 7,
    max_objects: int = 4,
    size: int = 64,
    class_weights=None,
    style: str = "ppe",
) -> Scene:
    """Render one labelled scene; a pure function of its arguments."""
    if K < 1:
        raise InvalidInputError(f"K must be >= 1, got {K}")
    if max_objects < 1:
        raise InvalidInputError(f"max_objects must be >= 1, got {max_objects}")
    weights = np.asarray(class_weights if class_weights is not None else _default_weights(K), dtype=np.float64)
    if weights.shape != (K,) or (weights < 0).any() or weights.sum() <= 0:
        raise InvalidInputError(f"class_weights must be {K} non-negative values with positive sum")
    rng = SplitMix(derive(seed, 1))

    # background: tinted mid-tone with a gentle linear gradient
    base = rng.uniform(0.42, 0.62) + rng.uniform(-0.04, 0.04, size=3)
    gx, gy = rng.uniform(-0.05, 0.05, size=2)
    ramp = np.linspace(-1, 1, size)
    img = base[None, None, :] + (gx * ramp[None, :, None] + gy * ramp[:, None, None])

    n_objects = rng.integers(1, max_objects + 1)
    lo, hi = (max(2, round(f * size)) for f in SIZE_RANGE)
    annotations: list[tuple[int, BBox]] = []
    for _ in range(n_objects):
        for _attempt in range(20):
            # even pixel sizes keep centres on the pixel grid
            pw, ph = (2 * int(v) for v in rng.integers(lo // 2, hi // 2 + 1, size=2))
            x0 = rng.integers(0, size - pw + 1)
            y0 = rng.integers(0, size - ph + 1)
            box = _grid_box(x0, y0, pw, ph, size)
            if all(iou(box, other) <= MAX_OVERLAP for _, other in annotations):
                break
        else:
            continue
        cls = rng.choice_weighted(weights)
        shape, rgb = class_template(cls, style)
        colour = np.clip(np.asarray(rgb) + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
        mask = _shape_mask(shape, ph, pw)
        patch = img[y0 : y0 + ph, x0 : x0 + pw]
        patch[mask] = colour
        if shape == "striped":
            band = slice(ph // 3, max(ph // 3 + 1, ph // 2))
            patch[band] = np.clip(colour + 0.12, 0.0, 1.0)
        annotations.append((cls, box))

    image = apply_profile(img, profile, rng)
    return Scene(image=image, annotations=annotations, seed=seed, meta={"profile": profile.name})


def _grid_box(x0: int, y0: int, pw: int, ph: int, size: int) -> BBox:
    """Pixel rectangle as a 6-decimal box that never leaves the unit square."""
    cx = round((x0 + pw / 2) / size, 6)
    cy = round((y0 + ph / 2) / size, 6)
    w = round(pw / size, 6)
    h = round(ph / size, 6)
    # rounding can push a border-touching box out by half an ulp of the text format
    w = min(w, math.floor(2e6 * min(cx, 1 - cx)) / 1e6)
    h = min(h, math.floor(2e6 * min(cy, 1 - cy)) / 1e6)
    return BBox(cx, cy, w, h)


def _default_weights(K: int) -> np.ndarray:
    if K <= len(DEFAULT_CLASS_WEIGHTS):
        return np.asarray(DEFAULT_CLASS_WEIGHTS[:K])
    return np.ones(K)
