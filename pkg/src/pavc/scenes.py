"""Procedural sunny roadway scenes with YOLO-style vehicle annotations.

Stands in for real roadside camera footage: a bright sky, roadside band,
a perspective road with lane markings and box-shaped vehicles. Used for the
bundled test clip and for classifier/augmentation datasets.
"""
from __future__ import annotations

from typing import List, Tuple

import cv2
import numpy as np

from .media import Frame, VideoSequence

CAR, TRUCK = 0, 1


def _vehicle(img, rng, x, y, w, h, color):
    x0, y0, x1, y1 = int(x), int(y), int(x + w), int(y + h)
    cv2.rectangle(img, (x0, y0), (x1, y1), color, -1)
    # windshield and shadow
    wy = y0 + max(1, int(h * 0.15))
    cv2.rectangle(img, (x0 + max(1, int(w * 0.15)), wy), (x1 - max(1, int(w * 0.15)), wy + max(1, int(h * 0.25))), (40, 50, 60), -1)
    cv2.rectangle(img, (x0, y1), (x1, y1 + max(1, int(h * 0.08))), (30, 30, 30), -1)


def render_scene(size: int = 640, rng: np.random.Generator = None, vehicles=None, exposure: float = 1.0):
    """Render one scene; returns (rgb uint8 array, list of YOLO label lines).

    ``vehicles`` is a list of (class_id, x, y, w, h) in pixels; random when None.
    """
    rng = rng or np.random.default_rng(0)
    img = np.zeros((size, size, 3), np.float32)
    horizon = int(size * rng.uniform(0.30, 0.42))
    rows = np.linspace(0, 1, horizon)[:, None]
    top = np.array([150, 190, 245], np.float32)
    bottom = np.array([235, 240, 250], np.float32)
    img[:horizon] = (top * (1 - rows) + bottom * rows)[:, None, :]
    # sun glare keeps highlights near full scale
    cx = rng.uniform(0.1, 0.9) * size
    yy, xx = np.mgrid[0:horizon, 0:size]
    glare = np.exp(-((xx - cx) ** 2 + (yy - horizon * 0.2) ** 2) / (2 * (size * 0.08) ** 2))
    img[:horizon] += glare[..., None] * 40

    band = int(size * 0.06)
    green = np.array([60, 120, 50], np.float32) * rng.uniform(0.8, 1.2)
    img[horizon:horizon + band] = green
    img[horizon + band:] = np.array([95, 100, 95], np.float32) * rng.uniform(0.85, 1.15)
    canvas = np.clip(img, 0, 255).astype(np.uint8)

    # road edges and dashed lanes converge to a vanishing point
    vp = (int(size * rng.uniform(0.4, 0.6)), horizon + band)
    for frac in (0.05, 0.95):
        cv2.line(canvas, vp, (int(size * frac), size - 1), (230, 230, 230), max(1, size // 160))
    for frac in (0.35, 0.65):
        end = (int(size * frac), size - 1)
        for k in range(0, 10, 2):
            a, b = k / 10, (k + 1) / 10
            p = (int(vp[0] + (end[0] - vp[0]) * a), int(vp[1] + (end[1] - vp[1]) * a))
            q = (int(vp[0] + (end[0] - vp[0]) * b), int(vp[1] + (end[1] - vp[1]) * b))
            cv2.line(canvas, p, q, (220, 210, 120), max(1, size // 200))

    if vehicles is None:
        vehicles = []
        for _ in range(int(rng.integers(2, 6))):
            cls = TRUCK if rng.random() < 0.25 else CAR
            depth = rng.uniform(0.15, 1.0)
            w = size * (0.08 + 0.14 * depth) * (1.4 if cls == TRUCK else 1.0)
            h = w * (0.9 if cls == TRUCK else 0.7)
            y = vp[1] + (size - vp[1] - h - 2) * depth
            x = rng.uniform(0.05, 0.95) * (size - w)
            vehicles.append((cls, x, y, w, h))
    labels = []
    for cls, x, y, w, h in sorted(vehicles, key=lambda v: v[2]):
        color = tuple(int(c) for c in rng.integers(20, 250, 3))
        _vehicle(canvas, rng, x, y, w, h, color)
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(size - 1.0, x + w), min(size - 1.0, y + h)
        labels.append(
            f"{cls} {(x0 + x1) / 2 / size:.6f} {(y0 + y1) / 2 / size:.6f} "
            f"{(x1 - x0) / size:.6f} {(y1 - y0) / size:.6f}"
        )

    out = canvas.astype(np.float32) * exposure + rng.normal(0, 2.0, canvas.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), labels


def sunny_dataset(n: int, size: int = 640, seed: int = 0) -> List[Tuple[Frame, List[str]]]:
    """``n`` independent sunny scenes with annotations."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        px, labels = render_scene(size, rng, exposure=rng.uniform(0.9, 1.05))
        out.append((Frame(px, i), labels))
    return out


def synthetic_clip(n_frames: int = 8, size: int = 96, seed: int = 7, frame_rate: float = 10.0) -> VideoSequence:
    """A short sunny clip with vehicles moving toward the camera.

    This is the bundled test clip: fully determined by its arguments.
    """
    rng = np.random.default_rng(seed)
    base = [
        (CAR, 0.15 * size, 0.50 * size, 0.18 * size, 0.13 * size),
        (TRUCK, 0.55 * size, 0.45 * size, 0.22 * size, 0.20 * size),
        (CAR, 0.35 * size, 0.70 * size, 0.20 * size, 0.14 * size),
    ]
    frames = []
    for t in range(n_frames):
        moved = [(c, x + 0.01 * size * t * (1 if i % 2 else -1), y + 0.015 * size * t, w, h)
                 for i, (c, x, y, w, h) in enumerate(base)]
        scene_rng = np.random.default_rng([seed, 0])
        px, _ = render_scene(size, scene_rng, vehicles=moved)
        noise = rng.normal(0, 1.5, px.shape)
        frames.append(np.clip(np.rint(px + noise), 0, 255).astype(np.uint8))
    return VideoSequence.from_arrays(frames, frame_rate)
