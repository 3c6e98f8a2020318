"""Synthesis of darkness and rain conditions from sunny frames.

Darkening scales the lightness channel in HSL space; rain draws seeded
near-vertical bright streaks and blurs the result. Everything is a pure
function of its inputs and seed.
"""
from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmptyDatasetError, InputError
from .media import Frame, require_rgb, write_image

REFERENCE_AREA = 640 * 640


class ConditionLabel(enum.IntEnum):
    SUNNY = 0
    LIGHT_DARK = 1
    MEDIUM_DARK = 2
    HEAVY_DARK = 3
    DRIZZLE = 4
    MODERATE_RAIN = 5
    TORRENTIAL_RAIN = 6

    @property
    def slug(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def parse(cls, value) -> "ConditionLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        text = str(value).strip().lower().replace("_", "-")
        if text.isdigit():
            return cls(int(text))
        for member in cls:
            if member.slug == text:
                return member
        raise InputError(f"unknown condition {value!r}")


DARK_LEVELS = (ConditionLabel.LIGHT_DARK, ConditionLabel.MEDIUM_DARK, ConditionLabel.HEAVY_DARK)
RAIN_LEVELS = (ConditionLabel.DRIZZLE, ConditionLabel.MODERATE_RAIN, ConditionLabel.TORRENTIAL_RAIN)
_LEVEL_ALIASES = {
    "light": ConditionLabel.LIGHT_DARK,
    "medium": ConditionLabel.MEDIUM_DARK,
    "heavy": ConditionLabel.HEAVY_DARK,
    "drizzle": ConditionLabel.DRIZZLE,
    "moderate": ConditionLabel.MODERATE_RAIN,
    "torrential": ConditionLabel.TORRENTIAL_RAIN,
}


def _level(value, allowed) -> int:
    if isinstance(value, str) and value.lower() in _LEVEL_ALIASES:
        label = _LEVEL_ALIASES[value.lower()]
    else:
        label = ConditionLabel.parse(value)
    if label not in allowed:
        raise InputError(f"{label.slug} is not one of {[a.slug for a in allowed]}")
    return allowed.index(label)


@dataclass(frozen=True)
class AugmentParams:
    """Per-level knobs. Tuples are indexed (light, medium, heavy) or
    (drizzle, moderate, torrential). Streak counts are per 640x640 frame and
    scale with frame area when ``scale_with_area`` is set."""

    darkness_scale: Tuple[float, float, float] = (0.65, 0.40, 0.20)
    streak_count: Tuple[int, int, int] = (40, 150, 400)
    streak_length: Tuple[int, int] = (8, 20)
    streak_alpha: float = 0.8
    streak_value: int = 225
    blur_radius: Tuple[int, int, int] = (1, 1, 2)
    angle_band_deg: float = 15.0
    scale_with_area: bool = True
    seed: int = 0

    def __post_init__(self):
        d = self.darkness_scale
        if not all(0 < s <= 1 for s in d) or not d[0] > d[1] > d[2]:
            raise InputError(f"darkness_scale must be strictly decreasing in (0, 1]: {d}")
        c = self.streak_count
        if min(c) < 0 or not c[0] < c[1] < c[2]:
            raise InputError(f"streak_count must be strictly increasing and >= 0: {c}")
        lo, hi = self.streak_length
        if not 1 <= lo <= hi:
            raise InputError(f"bad streak_length {self.streak_length}")
        if not 0 < self.streak_alpha <= 1:
            raise InputError("streak_alpha must lie in (0, 1]")
        if min(self.blur_radius) < 0:
            raise InputError("blur_radius must be >= 0")

    def to_dict(self):
        return {
            "darkness_scale": list(self.darkness_scale),
            "streak_count": list(self.streak_count),
            "streak_length": list(self.streak_length),
            "streak_alpha": self.streak_alpha,
            "streak_value": self.streak_value,
            "blur_radius": list(self.blur_radius),
            "angle_band_deg": self.angle_band_deg,
            "scale_with_area": self.scale_with_area,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("darkness_scale", "streak_count", "streak_length", "blur_radius"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


# -- HSL ----------------------------------------------------------------------


def rgb_to_hsl(rgb: np.ndarray):
    """Hexcone RGB -> (H, S, L), all float64; H in [0, 1)."""
    x = rgb.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    light = (mx + mn) / 2.0
    d = mx - mn
    chromatic = d > 0
    denom = np.where(light <= 0.5, mx + mn, 2.0 - mx - mn)
    sat = np.zeros_like(light)
    np.divide(d, denom, out=sat, where=chromatic & (denom > 0))

    hue = np.zeros_like(light)
    safe_d = np.where(chromatic, d, 1.0)
    hr = ((g - b) / safe_d) % 6.0
    hg = (b - r) / safe_d + 2.0
    hb = (r - g) / safe_d + 4.0
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    hue = np.where(chromatic, hue / 6.0, 0.0)
    return hue, sat, light


def _hue_channel(p, q, t):
    t = t % 1.0
    return np.where(
        t < 1 / 6,
        p + (q - p) * 6 * t,
        np.where(t < 1 / 2, q, np.where(t < 2 / 3, p + (q - p) * (2 / 3 - t) * 6, p)),
    )


def hsl_to_rgb(hue, sat, light) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsl`; returns float RGB in [0, 255]."""
    q = np.where(light < 0.5, light * (1 + sat), light + sat - light * sat)
    p = 2 * light - q
    out = np.stack(
        [_hue_channel(p, q, hue + 1 / 3), _hue_channel(p, q, hue), _hue_channel(p, q, hue - 1 / 3)],
        axis=-1,
    )
    grey = (sat == 0)[..., None]
    out = np.where(grey, light[..., None], out)
    return out * 255.0


def lightness(frame) -> np.ndarray:
    """HSL lightness in [0, 1] per pixel."""
    px = require_rgb(frame)
    return (px.max(axis=-1).astype(np.float64) + px.min(axis=-1)) / 510.0


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


# -- augmentations --------------------------------------------------------------


def darken(frame, scale: float) -> np.ndarray:
    px = require_rgb(frame)
    if scale == 1.0:
        return px.copy()
    h, s, l = rgb_to_hsl(px)
    return _to_uint8(hsl_to_rgb(h, s, l * scale))


def apply_darkness(frame, level, params: AugmentParams = AugmentParams()) -> Frame:
    """Scale HSL lightness by ``params.darkness_scale[level]``; deterministic."""
    idx = _level(level, DARK_LEVELS)
    out = darken(frame, params.darkness_scale[idx])
    return Frame(out, frame.index if isinstance(frame, Frame) else 0)


def streak_count_for(shape, level, params: AugmentParams) -> int:
    base = params.streak_count[_level(level, RAIN_LEVELS)]
    if not params.scale_with_area or base == 0:
        return base
    return max(1, int(round(base * shape[0] * shape[1] / REFERENCE_AREA)))


def streak_segments(shape, level, params: AugmentParams, rng: np.random.Generator):
    """Sample streaks as a list of (row, col) integer point arrays.

    Points are deduplicated per streak and clipped to the frame.
    """
    height, width = shape[:2]
    n = streak_count_for(shape, level, params)
    lo, hi = params.streak_length
    band = math.radians(params.angle_band_deg)
    segments = []
    for _ in range(n):
        x0 = rng.uniform(0, width)
        y0 = rng.uniform(0, height - lo) if height > lo else 0.0
        length = int(rng.integers(lo, hi + 1))
        angle = rng.uniform(-band, band)
        t = np.arange(length, dtype=np.float64)
        cols = np.floor(x0 + t * math.sin(angle)).astype(np.int64)
        rows = np.floor(y0 + t * math.cos(angle)).astype(np.int64)
        keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        pts = np.unique(np.stack([rows[keep], cols[keep]], axis=1), axis=0)
        segments.append(pts)
    return segments


def streak_mask(shape, level, params: AugmentParams) -> np.ndarray:
    """Boolean mask of every pixel a rain pass with ``params.seed`` touches."""
    rng = np.random.Generator(np.random.PCG64(params.seed))
    mask = np.zeros(shape[:2], dtype=bool)
    for pts in streak_segments(shape, level, params, rng):
        mask[pts[:, 0], pts[:, 1]] = True
    return mask


def apply_rain(frame, level, params: AugmentParams = AugmentParams()) -> Frame:
    """Blend seeded bright streaks onto the frame, then Gaussian-blur it."""
    px = require_rgb(frame)
    idx = _level(level, RAIN_LEVELS)
    mask = streak_mask(px.shape, level, params)
    out = px
    if mask.any():
        blended = px.astype(np.float64)
        a = params.streak_alpha
        blended[mask] = (1 - a) * blended[mask] + a * params.streak_value
        out = _to_uint8(blended)
    radius = params.blur_radius[idx]
    if radius > 0:
        k = 2 * radius + 1
        out = cv2.GaussianBlur(out, (k, k), 0, borderType=cv2.BORDER_REFLECT_101)
    else:
        out = out.copy()
    return Frame(out, frame.index if isinstance(frame, Frame) else 0)


def derive_seed(seed: int, condition: int, index: int) -> int:
    """Per-image seed from (dataset seed, condition, image index); order-free."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(condition), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def apply_condition(frame, condition, params: AugmentParams = AugmentParams(), index: int = 0) -> Frame:
    """Render ``condition`` onto a sunny frame; rain seeds come from ``derive_seed``."""
    label = ConditionLabel.parse(condition)
    if label == ConditionLabel.SUNNY:
        px = require_rgb(frame)
        return frame if isinstance(frame, Frame) else Frame(px, index)
    if label in DARK_LEVELS:
        return apply_darkness(frame, label, params)
    local = replace(params, seed=derive_seed(params.seed, label, index))
    return apply_rain(frame, label, local)


def augment_dataset(samples: Sequence, seed: int = 0, params: AugmentParams = None) -> Dict[ConditionLabel, List]:
    """Expand sunny ``(frame, annotations)`` pairs into all seven conditions.

    The sunny entry holds the inputs unchanged; annotations are deep-copied
    because every augmentation here is photometric.
    """
    if not samples:
        raise EmptyDatasetError("augment_dataset needs at least one input image")
    params = replace(params or AugmentParams(), seed=seed)
    out: Dict[ConditionLabel, List] = {}
    for label in ConditionLabel:
        rows = []
        for i, (frame, ann) in enumerate(samples):
            f = frame if isinstance(frame, Frame) else Frame(frame, i)
            rows.append((apply_condition(f, label, params, i), copy.deepcopy(ann)))
        out[label] = rows
    return out


def write_augmented(dataset: Dict[ConditionLabel, List], out_dir, names: Sequence[str] = None) -> Path:
    """Write each condition to its own directory; annotations (lists of text
    lines) go next to the images as ``.txt``. Returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = {}
    for label, rows in dataset.items():
        sub = out_dir / f"{int(label)}_{label.slug}"
        sub.mkdir(parents=True, exist_ok=True)
        for i, (frame, ann) in enumerate(rows):
            stem = names[i] if names else f"img_{i:05d}"
            write_image(sub / f"{stem}.png", frame)
            if ann is not None:
                lines = ann if isinstance(ann, (list, tuple)) else [str(ann)]
                (sub / f"{stem}.txt").write_text("".join(f"{l}\n" for l in lines))
        manifest[label.slug] = str(sub.relative_to(out_dir))
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


class WeatherAugmenter(BaseEstimator, TransformerMixin):
    """Transformer rendering one condition onto a batch of sunny frames.

    Stateless; ``fit`` only validates parameters. Seeds are derived per
    position in the batch, so output does not depend on call order.
    """

    def __init__(self, condition=ConditionLabel.DRIZZLE, seed=0, params=None):
        self.condition = condition
        self.seed = seed
        self.params = params

    def fit(self, X=None, y=None):
        self.condition_ = ConditionLabel.parse(self.condition)
        self.params_ = replace(self.params or AugmentParams(), seed=self.seed)
        return self

    def transform(self, X):
        if not hasattr(self, "params_"):
            self.fit()
        return [
            apply_condition(x, self.condition_, self.params_, i).pixels for i, x in enumerate(X)
        ]
