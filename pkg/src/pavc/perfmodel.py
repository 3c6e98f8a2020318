"""Transmission-time model for raw versus condition-compressed video.

Units follow the field measurements: sizes in bytes, link rate in megabits
per second, compression bandwidth in megabytes per second, detector time
in seconds. "Mega" is decimal (1e6) throughout.

    t_org  = S_org * 8e-6 / B_comm
    t_pavc = S_org * 1e-6 / B_comp + S_comp * 8e-6 / B_comm + t_wd
    speed-up = t_org / t_pavc
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import DomainError

MEGA = 1e6
BITS_PER_BYTE = 8


class Infeasible:
    """Compression overhead alone exceeds the uncompressed transfer time."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFEASIBLE"

    def __bool__(self):
        return False


INFEASIBLE = Infeasible()


def megabits(n_bytes: float) -> float:
    return n_bytes * BITS_PER_BYTE / MEGA


def megabytes(n_bytes: float) -> float:
    return n_bytes / MEGA


@dataclass(frozen=True)
class PerfParams:
    s_org: float  # bytes
    s_comp: float  # bytes
    b_comm: float  # Mbit/s
    b_comp: float  # MB/s
    t_weatherdetector: float = 0.0  # s

    def __post_init__(self):
        for name in ("s_org", "s_comp", "b_comm", "b_comp"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be positive and finite, got {value!r}")
        if not (self.t_weatherdetector >= 0 and math.isfinite(self.t_weatherdetector)):
            raise DomainError("t_weatherdetector must be >= 0")
        if self.s_comp > self.s_org:
            warnings.warn("compressed size exceeds original size", RuntimeWarning, stacklevel=3)

    def replace(self, **changes) -> "PerfParams":
        return dataclasses.replace(self, **changes)

    def to_canonical(self) -> Dict[str, float]:
        """Bits, bits/second and seconds."""
        return {
            "s_org_bits": self.s_org * BITS_PER_BYTE,
            "s_comp_bits": self.s_comp * BITS_PER_BYTE,
            "b_comm_bps": self.b_comm * MEGA,
            "b_comp_bps": self.b_comp * MEGA * BITS_PER_BYTE,
            "t_wd_s": self.t_weatherdetector,
        }

    @classmethod
    def from_canonical(cls, c: Dict[str, float]) -> "PerfParams":
        return cls(c["s_org_bits"] / BITS_PER_BYTE, c["s_comp_bits"] / BITS_PER_BYTE,
                   c["b_comm_bps"] / MEGA, c["b_comp_bps"] / BITS_PER_BYTE / MEGA, c["t_wd_s"])

    def to_dict(self):
        return {"s_org_bytes": self.s_org, "s_comp_bytes": self.s_comp, "b_comm_mbps": self.b_comm,
                "b_comp_MBps": self.b_comp, "t_weatherdetector_s": self.t_weatherdetector}


@dataclass(frozen=True)
class TransmissionEstimate:
    t_org: float
    t_pavc: float
    speed_up: float


def t_uncompressed(p: PerfParams) -> float:
    return megabits(p.s_org) / p.b_comm


def compression_overhead(p: PerfParams) -> float:
    """Seconds spent before the first compressed byte: encode + classify."""
    return megabytes(p.s_org) / p.b_comp + p.t_weatherdetector


def t_pavc(p: PerfParams) -> float:
    return compression_overhead(p) + megabits(p.s_comp) / p.b_comm


def speed_up(p: PerfParams) -> float:
    return t_uncompressed(p) / t_pavc(p)


def estimate(p: PerfParams) -> TransmissionEstimate:
    t0, t1 = t_uncompressed(p), t_pavc(p)
    return TransmissionEstimate(t0, t1, t0 / t1)


def required_bandwidth(p: PerfParams) -> Union[float, Infeasible]:
    """Link rate (Mbit/s) at which the compressed arm takes as long as the raw
    arm does at ``p.b_comm``."""
    slack = t_uncompressed(p) - compression_overhead(p)
    if slack <= 0:
        return INFEASIBLE
    return megabits(p.s_comp) / slack


def bandwidth_reduction(p: PerfParams) -> Union[float, Infeasible]:
    req = required_bandwidth(p)
    if req is INFEASIBLE:
        return INFEASIBLE
    return p.b_comm / req


@dataclass
class SpeedupSurface:
    """Speed-up over (compression ratio x compression bandwidth).

    ``table[i, j]`` is for ``ratios[i]`` and ``b_comp[j]``; NaN marks cells
    whose parameters were invalid. ``breakeven_b_comp[i]`` is the compression
    bandwidth giving speed-up exactly 1 at ``ratios[i]`` (None if no finite
    bandwidth reaches it).
    """

    s_org: float
    b_comm: float
    t_weatherdetector: float
    ratios: np.ndarray
    b_comp: np.ndarray
    table: np.ndarray
    breakeven_b_comp: List[Optional[float]]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["compression_ratio", "b_comp_MBps", "b_comm_mbps", "s_org_bytes",
                        "t_weatherdetector_s", "speed_up", "valid"])
            for i, r in enumerate(self.ratios):
                for j, b in enumerate(self.b_comp):
                    v = self.table[i, j]
                    ok = bool(np.isfinite(v))
                    w.writerow([repr(float(r)), repr(float(b)), repr(self.b_comm), repr(self.s_org),
                                repr(self.t_weatherdetector), repr(float(v)) if ok else "", int(ok)])
        return path

    def summary(self) -> dict:
        return {
            "s_org_bytes": self.s_org,
            "b_comm_mbps": self.b_comm,
            "t_weatherdetector_s": self.t_weatherdetector,
            "speed_up_1_contour": [
                {"compression_ratio": float(r), "b_comp_MBps": b}
                for r, b in zip(self.ratios, self.breakeven_b_comp)
            ],
            "max_speed_up": float(np.nanmax(self.table)) if np.isfinite(self.table).any() else None,
        }


def breakeven_b_comp(s_org: float, ratio: float, b_comm: float, t_wd: float = 0.0) -> Optional[float]:
    """Compression bandwidth (MB/s) where speed-up equals 1, or None."""
    s_comp = s_org / ratio
    slack = megabits(s_org) / b_comm - megabits(s_comp) / b_comm - t_wd
    if slack <= 0:
        return None
    return megabytes(s_org) / slack


def speedup_surface(s_org: float, ratios: Sequence[float], b_comp: Sequence[float], b_comm: float,
                    t_wd: float = 0.0) -> SpeedupSurface:
    ratios = np.asarray(ratios, dtype=float)
    b_comp = np.asarray(b_comp, dtype=float)
    if ratios.size == 0 or b_comp.size == 0:
        raise DomainError("speed-up surface needs non-empty grids")
    table = np.full((ratios.size, b_comp.size), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, r in enumerate(ratios):
            for j, b in enumerate(b_comp):
                try:
                    table[i, j] = speed_up(PerfParams(s_org, s_org / r, b_comm, b, t_wd))
                except (DomainError, ZeroDivisionError):
                    pass
    contour = []
    for r in ratios:
        try:
            contour.append(breakeven_b_comp(s_org, r, b_comm, t_wd) if r > 0 else None)
        except ZeroDivisionError:
            contour.append(None)
    return SpeedupSurface(s_org, b_comm, t_wd, ratios, b_comp, table, contour)


def reduction_rows(cases: Dict[str, PerfParams]) -> List[dict]:
    """Tabulate required bandwidth and reduction ratio per named case."""
    rows = []
    for name, p in cases.items():
        req = required_bandwidth(p)
        red = bandwidth_reduction(p)
        rows.append({
            "case": name, "b_comm_mbps": p.b_comm,
            "required_mbps": None if req is INFEASIBLE else req,
            "reduction_ratio": None if red is INFEASIBLE else red,
            "feasible": req is not INFEASIBLE,
        })
    return rows


def write_rows_csv(rows: List[dict], path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path
