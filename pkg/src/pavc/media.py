"""Frames, sequences, PSNR and lossless dataset I/O."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import cv2
import numpy as np

from .errors import ChannelError, EmptyDatasetError, InputError, LengthError, ShapeError

MAX_SAMPLE = 255.0
LOSSLESS_SUFFIXES = {".png", ".bmp", ".ppm", ".pnm", ".pgm", ".tif", ".tiff"}

ArrayLike = Union["Frame", np.ndarray]


@dataclass(frozen=True, eq=False)
class Frame:
    """An immutable 8-bit raster of shape (height, width, channels)."""

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"frame must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ShapeError(f"frame dimensions must be positive, got {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ChannelError(f"frame must have 1 or 3 channels, got {arr.shape[2]}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.number) and (arr.min() < 0 or arr.max() > 255):
                raise InputError("sample values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def dims(self):
        return (self.width, self.height, self.channels)

    @property
    def nbytes(self) -> int:
        return self.pixels.nbytes

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def with_pixels(self, pixels: np.ndarray) -> "Frame":
        return Frame(pixels, self.index)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class VideoSequence:
    frames: tuple
    frame_rate: float = 30.0

    def __post_init__(self):
        frames = tuple(
            f if isinstance(f, Frame) else Frame(f, i) for i, f in enumerate(self.frames)
        )
        if frames:
            dims = frames[0].dims
            for i, f in enumerate(frames):
                if f.dims != dims:
                    raise ShapeError(f"frame {i} has dims {f.dims}, expected {dims}")
            # indices are positional; renumber anything out of order
            if any(f.index != i for i, f in enumerate(frames)):
                frames = tuple(Frame(f.pixels, i) for i, f in enumerate(frames))
        if self.frame_rate <= 0:
            raise InputError("frame_rate must be positive")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray], frame_rate: float = 30.0):
        return cls(tuple(Frame(a, i) for i, a in enumerate(arrays)), frame_rate)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def dims(self):
        if not self.frames:
            raise EmptyDatasetError("empty sequence has no dimensions")
        return self.frames[0].dims

    @property
    def raw_bytes(self) -> int:
        """Size of the uncompressed payload: width * height * channels * frames."""
        if not self.frames:
            return 0
        w, h, c = self.dims
        return w * h * c * len(self.frames)

    def as_array(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr_db: float
    per_frame_psnr: List[float] = field(default_factory=list)

    def to_dict(self):
        # JSON has no infinity literal
        enc = lambda v: "inf" if math.isinf(v) else v
        return {
            "mse": self.mse,
            "psnr_db": enc(self.psnr_db),
            "per_frame_psnr": [enc(v) for v in self.per_frame_psnr],
        }


def as_pixels(frame: ArrayLike) -> np.ndarray:
    """Return the (H, W, C) uint8 array behind a Frame or array-like."""
    if isinstance(frame, Frame):
        return frame.pixels
    return Frame(frame).pixels


def require_rgb(frame: ArrayLike) -> np.ndarray:
    px = as_pixels(frame)
    if px.shape[2] != 3:
        raise ChannelError(f"expected a 3-channel RGB frame, got {px.shape[2]} channel(s)")
    return px


def _dims(px):
    return (px.shape[1], px.shape[0], px.shape[2])


def mse(a: ArrayLike, b: ArrayLike) -> float:
    pa, pb = as_pixels(a), as_pixels(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"dimension mismatch: {_dims(pa)} vs {_dims(pb)}")
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(MAX_SAMPLE**2 / value)


def psnr(a: ArrayLike, b: ArrayLike) -> float:
    """PSNR in dB with MAX = 255; identical inputs give ``math.inf``."""
    return psnr_from_mse(mse(a, b))


def sequence_psnr(original: VideoSequence, reconstructed: VideoSequence) -> QualityReport:
    """Aggregate PSNR from the mean per-frame MSE (not the mean of dB values)."""
    if len(original) != len(reconstructed):
        raise LengthError(
            f"frame-count mismatch: {len(original)} vs {len(reconstructed)}"
        )
    if len(original) == 0:
        raise EmptyDatasetError("cannot compute PSNR of empty sequences")
    errors = [mse(a, b) for a, b in zip(original, reconstructed)]
    agg = float(np.mean(errors))
    return QualityReport(agg, psnr_from_mse(agg), [psnr_from_mse(e) for e in errors])


# -- dataset file I/O -------------------------------------------------------


def _check_lossless(path: Path):
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise InputError(
            f"{path}: only lossless raster formats are accepted "
            f"({', '.join(sorted(LOSSLESS_SUFFIXES))})"
        )


def write_image(path, frame: ArrayLike) -> Path:
    path = Path(path)
    _check_lossless(path)
    px = as_pixels(frame)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = px[:, :, 0] if px.shape[2] == 1 else cv2.cvtColor(px, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), out):
        raise InputError(f"could not write image {path}")
    return path


def read_image(path, index: int = 0) -> Frame:
    path = Path(path)
    _check_lossless(path)
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise InputError(f"could not read image {path}")
    if data.dtype != np.uint8:
        raise InputError(f"{path}: only 8-bit images are supported")
    if data.ndim == 3:
        if data.shape[2] == 4:
            data = data[:, :, :3]
        data = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return Frame(data, index)


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in LOSSLESS_SUFFIXES)


def save_sequence(seq: VideoSequence, directory, manifest_name: str = "manifest.json") -> Path:
    """Write frames as PNG files plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for f in seq:
        name = f"frame_{f.index:06d}.png"
        write_image(directory / name, f)
        names.append(name)
    manifest = directory / manifest_name
    manifest.write_text(json.dumps({"frame_rate": seq.frame_rate, "frames": names}, indent=2))
    return manifest


def load_sequence(manifest_path) -> VideoSequence:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
        names: Sequence[str] = doc["frames"]
        rate = float(doc["frame_rate"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad sequence manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    frames = [read_image(base / n if not os.path.isabs(n) else n, i) for i, n in enumerate(names)]
    return VideoSequence(tuple(frames), rate)
