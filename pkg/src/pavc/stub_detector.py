"""Stand-in detector for exercising the adapter contract.

    python -m pavc.stub_detector --labels GT_DIR [--jitter F] [--seed N] IN_DIR OUT_DIR

Echoes each image's ground truth as detections (confidence 1). With
``--jitter`` the boxes are displaced by up to that fraction of their size and
the confidence decays with the displacement.
"""
import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .detection import BBox, format_boxes, read_boxes
from .media import list_images


def main(argv=None):
    ap = argparse.ArgumentParser(prog="pavc-stub-detector")
    ap.add_argument("--labels", required=True)
    ap.add_argument("--jitter", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("input_dir")
    ap.add_argument("output_dir")
    args = ap.parse_args(argv)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for img in list_images(args.input_dir):
        gts = read_boxes(Path(args.labels) / f"{img.stem}.txt", with_confidence=False)
        digest = hashlib.sha256(img.stem.encode()).digest()[:8]
        rng = np.random.default_rng([args.seed, int.from_bytes(digest, "big")])
        dets = []
        for g in gts:
            if args.jitter > 0:
                dx, dy = rng.uniform(-args.jitter, args.jitter, 2)
                box = BBox(g.class_id, g.cx + dx * g.w, g.cy + dy * g.h, g.w, g.h).clamped()
                conf = float(np.exp(-4.0 * np.hypot(dx, dy)))
                dets.append(BBox(box.class_id, box.cx, box.cy, box.w, box.h, round(conf, 6)))
            else:
                dets.append(BBox(g.class_id, g.cx, g.cy, g.w, g.h, 1.0))
        (out / f"{img.stem}.txt").write_text(format_boxes(dets, with_confidence=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
