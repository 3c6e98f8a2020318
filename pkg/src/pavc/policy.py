"""Condition -> CRF policy table and the calibration scan that builds it."""
from __future__ import annotations

import json
import logging
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

from .augment import ConditionLabel
from .codec import CRF_MAX, Crf
from .errors import CalibrationAborted, InputError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.985

PUBLISHED_MAX_CRF = {
    ConditionLabel.SUNNY: 40,
    ConditionLabel.LIGHT_DARK: 40,
    ConditionLabel.MEDIUM_DARK: 50,
    ConditionLabel.HEAVY_DARK: 21,
    ConditionLabel.DRIZZLE: 10,
    ConditionLabel.MODERATE_RAIN: 7,
    ConditionLabel.TORRENTIAL_RAIN: 0,
}


@dataclass(frozen=True)
class Encode:
    crf: int


@dataclass(frozen=True)
class Bypass:
    """Send raw frames; compression would buy nothing."""


Decision = Union[Encode, Bypass]


@dataclass(frozen=True)
class CrfPolicy:
    max_crf: Mapping[ConditionLabel, int]
    threshold_map: float = DEFAULT_THRESHOLD
    source: str = ""
    bypass_at_zero: bool = True

    def __post_init__(self):
        table = {ConditionLabel.parse(k): int(Crf(v)) for k, v in dict(self.max_crf).items()}
        missing = [c.slug for c in ConditionLabel if c not in table]
        if missing:
            raise InputError(f"policy lacks conditions: {', '.join(missing)}")
        if not 0 < self.threshold_map <= 1:
            raise InputError("threshold_map must lie in (0, 1]")
        object.__setattr__(self, "max_crf", table)

    def lookup(self, label) -> int:
        return self.max_crf[ConditionLabel.parse(label)]

    def to_dict(self):
        return {
            "max_crf": {c.slug: self.max_crf[c] for c in ConditionLabel},
            "threshold_map": self.threshold_map,
            "source": self.source,
            "bypass_at_zero": self.bypass_at_zero,
        }

    @classmethod
    def from_dict(cls, doc) -> "CrfPolicy":
        try:
            return cls(doc["max_crf"], float(doc["threshold_map"]), doc.get("source", ""),
                       bool(doc.get("bypass_at_zero", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed policy document: {exc}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "CrfPolicy":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read policy {path}: {exc}") from exc
        return cls.from_dict(doc)


def paper_default_policy(bypass_at_zero: bool = True) -> CrfPolicy:
    return CrfPolicy(dict(PUBLISHED_MAX_CRF), DEFAULT_THRESHOLD,
                     "published calibration, mAP threshold 0.985", bypass_at_zero)


def decide_compression(policy: CrfPolicy, label) -> Decision:
    crf = policy.lookup(label)
    if crf == 0 and policy.bypass_at_zero:
        return Bypass()
    return Encode(crf)


@dataclass
class CalibrationTrace:
    condition: ConditionLabel
    threshold: float
    tested: List[Tuple[int, float]] = field(default_factory=list)
    chosen: int = 0
    no_compression: bool = False
    mode: str = "first-failure"

    def to_jsonl(self) -> str:
        rows = [
            {"condition": self.condition.slug, "crf": c, "map": m, "passed": m >= self.threshold,
             "threshold": self.threshold}
            for c, m in self.tested
        ]
        rows.append({"condition": self.condition.slug, "chosen": self.chosen,
                     "no_compression": self.no_compression, "mode": self.mode})
        return "".join(json.dumps(r) + "\n" for r in rows)


MapOracle = Callable[[int], float]


def calibrate_max_crf(condition, map_oracle: MapOracle, threshold: float = DEFAULT_THRESHOLD,
                      step: int = 1, crf_max: int = CRF_MAX, exhaustive: bool = False) -> CalibrationTrace:
    """Scan CRF = 0, step, 2*step, ... <= crf_max and pick the largest passing one.

    The default stops at the first CRF whose mAP falls below ``threshold``;
    ``exhaustive`` probes every value and returns the global largest pass.
    If CRF 0 already fails, 0 is chosen and ``no_compression`` is set.
    """
    if step < 1:
        raise InputError("step must be >= 1")
    if not 0 <= crf_max <= CRF_MAX:
        raise InputError(f"crf_max must lie in [0, {CRF_MAX}]")
    trace = CalibrationTrace(ConditionLabel.parse(condition), threshold,
                             mode="exhaustive" if exhaustive else "first-failure")
    best = None
    for crf in range(0, crf_max + 1, step):
        try:
            value = float(map_oracle(crf))
        except Exception as exc:
            raise CalibrationAborted(f"mAP oracle failed at CRF {crf}: {exc}", trace) from exc
        trace.tested.append((crf, value))
        if value >= threshold:
            best = crf
        elif not exhaustive:
            break
    trace.chosen = 0 if best is None else best
    trace.no_compression = best is None
    return trace


def calibrate_policy(oracles: Mapping, threshold: float = DEFAULT_THRESHOLD, step: int = 1,
                     crf_max: int = CRF_MAX, exhaustive: bool = False,
                     bypass_at_zero: bool = True) -> Tuple[CrfPolicy, List[CalibrationTrace]]:
    """Calibrate every condition; ``oracles`` maps condition -> mAP oracle."""
    traces = [
        calibrate_max_crf(c, oracles[c], threshold, step, crf_max, exhaustive) for c in ConditionLabel
    ]
    policy = CrfPolicy({t.condition: t.chosen for t in traces}, threshold,
                       f"calibrated ({traces[0].mode}, step {step})", bypass_at_zero)
    return policy, traces


# -- oracles --------------------------------------------------------------------

_STEP = re.compile(r"^synthetic:step@(\d+)$")
_RAMP = re.compile(r"^synthetic:ramp(?:@([0-9.eE+-]+))?$")


def step_oracle(breakpoint: int, high: float = 1.0, low: float = 0.9) -> MapOracle:
    return lambda crf: high if crf <= breakpoint else low


def ramp_oracle(slope: float = 0.0005) -> MapOracle:
    """mAP = 1 - slope * crf (default crosses 0.985 just after CRF 30)."""
    return lambda crf: 1.0 - slope * crf


def parse_oracle(spec: str) -> MapOracle:
    """``synthetic:step@K`` or ``synthetic:ramp[@slope]``."""
    m = _STEP.match(spec)
    if m:
        return step_oracle(int(m.group(1)))
    m = _RAMP.match(spec)
    if m:
        return ramp_oracle(float(m.group(1))) if m.group(1) else ramp_oracle()
    raise InputError(f"unknown oracle {spec!r}; expected synthetic:step@K or synthetic:ramp[@slope]")


class DetectionMapOracle:
    """mAP after compressing a labelled image set at a CRF.

    Each image is encoded on its own (a one-frame clip), decoded, and handed
    to the detector adapter; detections are scored against ``label_dir``.
    Results are cached per CRF.
    """

    def __init__(self, image_dir, label_dir, adapter, encoder_config=None, iou_threshold: float = 0.5):
        self.image_dir = Path(image_dir)
        self.label_dir = Path(label_dir)
        self.adapter = adapter
        if encoder_config is None:
            from .codec import EncoderConfig

            encoder_config = EncoderConfig(measure_psnr=False)
        self.encoder_config = encoder_config
        self.iou_threshold = iou_threshold
        self._cache: Dict[int, float] = {}

    def __call__(self, crf: int) -> float:
        if crf in self._cache:
            return self._cache[crf]
        from .codec import decode, encode
        from .detection import evaluate_dirs, run_detector_adapter
        from .media import VideoSequence, list_images, read_image, write_image

        with tempfile.TemporaryDirectory(prefix="pavc-cal-") as tmp:
            images = Path(tmp) / "images"
            images.mkdir()
            for path in list_images(self.image_dir):
                seq = VideoSequence((read_image(path),))
                data, _ = encode(seq, crf, self.encoder_config)
                write_image(images / f"{path.stem}.png", decode(data, self.encoder_config)[0])
            dets = Path(tmp) / "dets"
            run_detector_adapter(self.adapter, images, dets)
            value = evaluate_dirs(dets, self.label_dir, iou_threshold=self.iou_threshold).map_value
        self._cache[crf] = value
        log.info("crf %d: mAP %.4f", crf, value)
        return value
