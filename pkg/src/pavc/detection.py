"""IoU, precision-recall, AP and mAP over YOLO-format box files.

Also runs external detectors through a file-based adapter contract: the
adapter reads images from one directory and writes one ``.txt`` per image
into another, lines ``class conf cx cy w h``.
"""
from __future__ import annotations

import json
import logging
import shlex
import subprocess
import sys
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyDatasetError, InputError, ParseError, SubprocessError, ToolNotFoundError
from .media import list_images

log = logging.getLogger(__name__)

DEFAULT_IOU = 0.5


@dataclass(frozen=True)
class BBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return max(0.0, self.w) * max(0.0, self.h)

    @classmethod
    def from_corners(cls, class_id, x0, y0, x1, y1, confidence=1.0) -> "BBox":
        return cls(class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, confidence)

    def clamped(self) -> "BBox":
        x0, y0, x1, y1 = self.corners
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(1.0, x1), min(1.0, y1)
        return BBox.from_corners(self.class_id, x0, y0, x1, y1, self.confidence)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; zero-area boxes give 0 with a warning."""
    if a.area <= 0 or b.area <= 0:
        warnings.warn("IoU with a zero-area box is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class APResult:
    ap: Optional[float]  # None when there is neither ground truth nor detection
    recall: List[float] = field(default_factory=list)
    precision: List[float] = field(default_factory=list)
    no_ground_truth: bool = False

    @property
    def curve(self):
        return list(zip(self.recall, self.precision))


def match_detections(dets: Sequence[Tuple[int, BBox]], gts: Dict[int, List[BBox]], iou_threshold: float):
    """Greedy matching in descending confidence (stable for ties).

    ``dets`` holds (image_id, box) pairs. Each detection takes the unmatched
    ground truth in its image with the highest IoU, if that IoU reaches the
    threshold; a ground truth is matched at most once. Returns a list of
    true-positive flags in ranked order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].confidence)
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags = []
    for i in order:
        img, det = dets[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts.get(img, ())):
            if used[img][j]:
                continue
            v = iou(det, gt)
            if v >= best_iou:
                if best < 0 or v > best_iou:
                    best, best_iou = j, v
        if best >= 0:
            used[img][best] = True
        flags.append(best >= 0)
    return flags


def pr_area(tp_flags: Sequence[bool], n_gt: int):
    """All-points interpolated AP from ranked TP flags.

    Returns (ap, recalls, precisions) with the raw (un-enveloped) curve.
    Recall and precision are ratios of counts, so the area is summed in
    exact rationals and rounded once.
    """
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    ranks = np.arange(1, len(tp) + 1)
    area = Fraction(0)
    best = Fraction(0)
    # walk from the lowest rank up so ``best`` is the precision envelope
    for k in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(tp[k]), int(ranks[k])))
        below = int(tp[k - 1]) if k else 0
        if tp[k] != below:
            area += Fraction(int(tp[k]) - below, n_gt) * best
    recall = (tp / n_gt).tolist()
    precision = (tp / ranks).tolist()
    return float(area), recall, precision


def _pooled_ap(dets, gts, iou_threshold) -> APResult:
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        if dets:
            return APResult(0.0, no_ground_truth=True)
        return APResult(None, no_ground_truth=True)
    if not dets:
        return APResult(0.0)
    flags = match_detections(dets, gts, iou_threshold)
    ap, rec, prec = pr_area(flags, n_gt)
    return APResult(ap, rec, prec)


def average_precision(dets: Sequence[BBox], gts: Sequence[BBox], iou_threshold: float = DEFAULT_IOU) -> APResult:
    """AP of single-class detections against one image's ground truth."""
    return _pooled_ap([(0, d) for d in dets], {0: list(gts)}, iou_threshold)


@dataclass
class EvalResult:
    per_class_ap: Dict[int, float]
    map_value: float
    pr_curves: Dict[int, List[Tuple[float, float]]]
    iou_threshold: float

    def to_dict(self):
        return {
            "map": self.map_value,
            "iou_threshold": self.iou_threshold,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "pr_curves": {str(k): [list(p) for p in v] for k, v in sorted(self.pr_curves.items())},
        }

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2))
        if csv_path:
            lines = ["class_id,rank,recall,precision"]
            for cls, pts in sorted(self.pr_curves.items()):
                lines += [f"{cls},{i},{r:.9g},{p:.9g}" for i, (r, p) in enumerate(pts)]
            Path(csv_path).write_text("\n".join(lines) + "\n")


def mean_average_precision(per_image: Sequence[Tuple[Sequence[BBox], Sequence[BBox]]],
                           classes: Optional[Iterable[int]] = None,
                           iou_threshold: float = DEFAULT_IOU) -> EvalResult:
    """Dataset-level mAP: detections are pooled across images per class.

    mAP averages AP over classes that have at least one ground-truth box.
    """
    gt_classes = {b.class_id for _, gts in per_image for b in gts}
    if not gt_classes:
        raise EmptyDatasetError("no ground-truth boxes to evaluate")
    universe = sorted(set(classes) if classes is not None else gt_classes | {
        b.class_id for dets, _ in per_image for b in dets})
    per_class, curves = {}, {}
    for cls in universe:
        dets = [(i, d) for i, (ds, _) in enumerate(per_image) for d in ds if d.class_id == cls]
        gts = {i: [g for g in gs if g.class_id == cls] for i, (_, gs) in enumerate(per_image)}
        res = _pooled_ap(dets, gts, iou_threshold)
        if res.ap is None:
            continue
        if res.no_ground_truth:
            log.warning("class %d has detections but no ground truth; excluded from mAP", cls)
            continue
        per_class[cls] = res.ap
        curves[cls] = res.curve
    value = float(np.mean([per_class[c] for c in sorted(per_class)])) if per_class else 0.0
    return EvalResult(per_class, value, curves, iou_threshold)


# -- files --------------------------------------------------------------------


def parse_boxes(text: str, with_confidence: bool, source: str = "<string>") -> List[BBox]:
    """Parse YOLO lines; out-of-range boxes are clamped to the unit square."""
    boxes = []
    want = 6 if with_confidence else 5
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != want:
            raise ParseError(f"{source}:{lineno}: expected {want} fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: {exc}") from exc
        conf = vals.pop(0) if with_confidence else 1.0
        if cls < 0 or not 0.0 <= conf <= 1.0:
            raise ParseError(f"{source}:{lineno}: bad class id or confidence")
        box = BBox(cls, *vals, confidence=conf)
        x0, y0, x1, y1 = box.corners
        if x0 < 0 or y0 < 0 or x1 > 1 or y1 > 1:
            warnings.warn(f"{source}:{lineno}: box exceeds the unit square; clamped", RuntimeWarning)
            box = box.clamped()
        boxes.append(box)
    return boxes


def read_boxes(path, with_confidence: bool) -> List[BBox]:
    path = Path(path)
    if not path.exists():
        return []
    return parse_boxes(path.read_text(), with_confidence, str(path))


def format_boxes(boxes: Iterable[BBox], with_confidence: bool) -> str:
    out = []
    for b in boxes:
        head = f"{b.class_id} {b.confidence:.6f}" if with_confidence else f"{b.class_id}"
        out.append(f"{head} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")
    return "".join(out)


def evaluate_dirs(det_dir, gt_dir, classes=None, iou_threshold: float = DEFAULT_IOU) -> EvalResult:
    """Evaluate every ground-truth ``.txt`` in ``gt_dir`` against ``det_dir``."""
    gt_files = sorted(Path(gt_dir).glob("*.txt"))
    if not gt_files:
        raise EmptyDatasetError(f"no ground-truth files in {gt_dir}")
    pairs = [
        (read_boxes(Path(det_dir) / g.name, True), read_boxes(g, False)) for g in gt_files
    ]
    return mean_average_precision(pairs, classes, iou_threshold)


@dataclass
class AdapterConfig:
    """Command template with ``{input_dir}`` and ``{output_dir}`` placeholders
    (``{python}`` expands to the running interpreter)."""

    command: str

    @classmethod
    def load(cls, path) -> "AdapterConfig":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(doc["command"])
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"bad detector adapter config {path}: {exc}") from exc


def run_detector_adapter(config: AdapterConfig, image_dir, output_dir) -> List[Path]:
    """Run the adapter over ``image_dir``; returns one detection file per image.

    Every produced file is parsed so malformed output fails here, with the
    offending file and line in the message.
    """
    images = list_images(image_dir) if Path(image_dir).is_dir() else []
    if not images:
        raise InputError(f"no images found in {image_dir}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    cmd = [t.format(input_dir=str(image_dir), output_dir=str(output_dir), python=sys.executable)
           for t in shlex.split(config.command)]
    try:
        proc = subprocess.run(cmd, capture_output=True)
    except FileNotFoundError as exc:
        raise ToolNotFoundError(f"detector adapter {cmd[0]!r} not found") from exc
    if proc.returncode != 0:
        err = proc.stderr.decode(errors="replace")[-2000:]
        raise SubprocessError(f"detector adapter exited {proc.returncode}: {err}", proc.returncode, err)
    outputs = []
    for img in images:
        path = output_dir / f"{img.stem}.txt"
        if not path.exists():
            raise SubprocessError(f"detector adapter wrote no detections for {img.name}")
        read_boxes(path, with_confidence=True)
        outputs.append(path)
    return outputs
