"""``pavc`` command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 invalid flags, 3 bad input,
4 missing external tool, 5 external process failure, 6 protocol/transport
failure, 7 calibration aborted, 8 unknown subcommand.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PavcError

EXIT_CODES = {
    "input": 3, "parse": 3, "domain": 3,
    "environment": 4,
    "subprocess": 5,
    "protocol": 6, "transport": 6, "session": 6,
    "calibration": 7,
}

log = logging.getLogger("pavc")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, extra=None):
    doc = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "pavc_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        doc.update(extra)
    (out / f"{args.command}_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _emit(doc):
    print(json.dumps(doc, indent=2, default=str))


def _require(path, what):
    if path is None or not Path(path).exists():
        from .errors import InputError

        raise InputError(f"{what} not found: {path}")
    return Path(path)


# -- subcommands --------------------------------------------------------------------


def cmd_augment(args):
    from .augment import AugmentParams, augment_dataset, write_augmented
    from .media import Frame, list_images, read_image
    from .scenes import sunny_dataset

    params = AugmentParams.from_dict(json.loads(Path(args.params).read_text())) if args.params else None
    if args.input:
        paths = list_images(_require(args.input, "input directory"))
        samples = []
        for i, p in enumerate(paths):
            lbl = p.with_suffix(".txt")
            samples.append((read_image(p, i), lbl.read_text().splitlines() if lbl.exists() else []))
        names = [p.stem for p in paths]
    else:
        samples, names = sunny_dataset(args.synthetic, args.size, args.seed), None
    out = _out(args)
    manifest = write_augmented(augment_dataset(samples, args.seed, params), out, names)
    _write_manifest(out, args)
    _emit({"manifest": str(manifest), "images": len(samples) * 7})


def _load_augmented(root: Path):
    from .augment import ConditionLabel
    from .media import list_images, read_image

    manifest = json.loads((root / "dataset.json").read_text())
    items = []
    for slug, sub in manifest.items():
        label = ConditionLabel.parse(slug)
        items += [(read_image(p), int(label)) for p in list_images(root / sub)]
    return items


def cmd_fit_classifier(args):
    from .augment import augment_dataset
    from .classifier import evaluate, fit, train_val_test_split
    from .scenes import sunny_dataset

    if args.dataset:
        items = _load_augmented(_require(args.dataset, "dataset directory"))
    else:
        ds = augment_dataset(sunny_dataset(args.synthetic, args.size, args.seed), args.seed)
        items = [(f, int(c)) for c, rows in ds.items() for f, _ in rows]
    train, val, test = train_val_test_split(items, args.seed)
    model = fit(train)
    out = _out(args)
    model.save(out / "classifier.json")
    result = {"train": len(train), "validation": len(val), "test": len(test)}
    for name, part in (("validation", val), ("test", test)):
        if part:
            cm = evaluate(model, part)
            (out / f"confusion_{name}.json").write_text(json.dumps(cm.to_dict(), indent=2))
            cm.write_csv(out / f"confusion_{name}.csv")
            result[f"{name}_accuracy"] = cm.accuracy
    _write_manifest(out, args)
    _emit(result)


def cmd_classify(args):
    from .classifier import ClassifierModel, timed_classify
    from .media import read_image

    model = ClassifierModel.load(_require(args.classifier, "classifier model"))
    rows = []
    for path in args.images:
        label, scores, seconds = timed_classify(model, read_image(_require(path, "image")))
        rows.append({"image": path, "label": int(label), "condition": label.slug,
                     "distances": [float(v) for v in scores], "seconds": seconds})
    _emit(rows)


def _clip(args):
    from .media import load_sequence
    from .scenes import synthetic_clip

    return load_sequence(_require(args.clip, "clip manifest")) if args.clip else synthetic_clip()


def cmd_sweep(args):
    from .codec import EncoderConfig, crf_sweep

    clip = _clip(args)
    cfg = EncoderConfig(executable=args.encoder, preset=args.preset, s_org_mode=args.s_org_mode)
    out = _out(args)
    records = crf_sweep(clip, _ints(args.crfs), cfg, out / "sweep.jsonl")
    _write_manifest(out, args)
    _emit([json.loads(r.to_json()) for r in records])


def cmd_calibrate(args):
    from .augment import ConditionLabel
    from .policy import DetectionMapOracle, calibrate_max_crf, calibrate_policy, parse_oracle
    from .detection import AdapterConfig

    if args.oracle:
        parse_oracle(args.oracle)
        make = lambda: parse_oracle(args.oracle)
    else:
        adapter = AdapterConfig.load(_require(args.detector, "detector adapter config"))
        images, labels = _require(args.images, "image directory"), _require(args.labels, "label directory")
        make = lambda: DetectionMapOracle(images, labels, adapter)
    out = _out(args)
    if args.condition == "all":
        policy, traces = calibrate_policy({c: make() for c in ConditionLabel}, args.threshold, args.step,
                                          args.crf_max, args.exhaustive)
        policy.save(out / "policy.json")
        result = policy.to_dict()
    else:
        traces = [calibrate_max_crf(args.condition, make(), args.threshold, args.step, args.crf_max,
                                    args.exhaustive)]
        t = traces[0]
        result = {"condition": t.condition.slug, "chosen_crf": t.chosen, "no_compression": t.no_compression,
                  "probes": len(t.tested)}
    (out / "calibration_trace.jsonl").write_text("".join(t.to_jsonl() for t in traces))
    _write_manifest(out, args)
    _emit(result)


def cmd_eval(args):
    from .detection import AdapterConfig, evaluate_dirs, run_detector_adapter

    labels = _require(args.labels, "label directory")
    if args.detector:
        adapter = AdapterConfig.load(_require(args.detector, "detector adapter config"))
        images = _require(args.images, "image directory")
    else:
        det_dir = _require(args.detections, "detection directory")
    out = _out(args)
    if args.detector:
        det_dir = out / "detections"
        run_detector_adapter(adapter, images, det_dir)
    res = evaluate_dirs(det_dir, labels, iou_threshold=args.iou)
    res.write(out / "eval.json", out / "pr_curves.csv")
    _write_manifest(out, args)
    _emit({"map": res.map_value, "per_class_ap": res.per_class_ap})


def cmd_model(args):
    from .perfmodel import (INFEASIBLE, PerfParams, bandwidth_reduction, estimate, required_bandwidth,
                            speedup_surface)

    p = PerfParams(args.s_org, args.s_comp, args.b_comm, args.b_comp, args.t_wd)
    est = estimate(p)
    req, red = required_bandwidth(p), bandwidth_reduction(p)
    doc = {
        "params": p.to_dict(),
        "t_org_s": est.t_org,
        "t_pavc_s": est.t_pavc,
        "speed_up": est.speed_up,
        "required_bandwidth_mbps": None if req is INFEASIBLE else req,
        "bandwidth_reduction": None if red is INFEASIBLE else red,
        "feasible": req is not INFEASIBLE,
    }
    if args.out:
        out = _out(args)
        (out / "model.json").write_text(json.dumps(doc, indent=2))
        if args.ratios and args.b_comp_grid:
            surfaces = []
            for rate in _floats(args.rates) if args.rates else [args.b_comm]:
                s = speedup_surface(args.s_org, _floats(args.ratios), _floats(args.b_comp_grid), rate, args.t_wd)
                s.write_csv(out / f"speedup_surface_{rate:g}mbps.csv")
                surfaces.append(s.summary())
            (out / "speedup_surfaces.json").write_text(json.dumps(surfaces, indent=2))
        _write_manifest(out, args)
    print(f"t_org = {est.t_org:.6f} s")
    print(f"t_pavc = {est.t_pavc:.6f} s")
    print(f"speed-up = {est.speed_up:.6f}")
    print("required bandwidth = " + ("infeasible" if req is INFEASIBLE else f"{req:.6f} Mbps"))
    print("bandwidth reduction = " + ("infeasible" if red is INFEASIBLE else f"{red:.6f}"))


def cmd_send(args):
    from .transport import SenderConfig, run_sender

    cfg = SenderConfig(
        dest=args.dest, link_rate=math.inf if args.rate <= 0 else args.rate, policy_path=args.policy,
        classifier_path=args.classifier, clip_manifest=args.clip, baseline=args.baseline,
        condition=args.condition, quantum=args.quantum,
        encoder={"executable": args.encoder} if args.encoder else None,
    )
    if not args.baseline and args.condition is None:
        _require(args.classifier, "classifier model")
    if args.policy:
        _require(args.policy, "policy file")
    if args.clip:
        _require(args.clip, "clip manifest")
    report = run_sender(cfg)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2))
    _emit({k: report[k] for k in ("mode", "condition_name", "crf", "total_s", "s_org_bytes", "s_comp_bytes")})


def cmd_recv(args):
    from .detection import AdapterConfig
    from .transport import run_receiver

    detector = AdapterConfig.load(_require(args.detector, "detector adapter config")) if args.detector else None
    report = run_receiver(args.listen, args.out, detector,
                          on_ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True))
    _emit({k: v for k, v in report.items() if k != "frame_indices"})


def collate_sessions(reports):
    """Pair baseline and PAVC sender reports per (link rate, condition).

    Baseline sessions carry no classified condition, so each PAVC session is
    matched with the baseline at its rate (a same-condition baseline wins).
    """
    baselines = {}
    for r in reports:
        if r.get("mode") == "baseline":
            baselines.setdefault(r["link_rate_mbps"], {})[r.get("condition")] = r
    rows = []
    for r in reports:
        if r.get("mode") != "pavc":
            continue
        pool = baselines.get(r["link_rate_mbps"], {})
        base = pool.get(r["condition"]) or (next(iter(pool.values())) if pool else None)
        rows.append({
            "link_rate_mbps": r["link_rate_mbps"],
            "condition": r["condition_name"],
            "crf": r["crf"],
            "t_pavc_s": r["total_s"],
            "t_org_s": base["total_s"] if base else None,
            "speed_up": base["total_s"] / r["total_s"] if base else None,
        })
    return sorted(rows, key=lambda x: (x["link_rate_mbps"], x["condition"]))


def cmd_report(args):
    from .perfmodel import write_rows_csv

    reports = [json.loads(Path(_require(p, "session report")).read_text()) for p in args.sessions]
    rows = collate_sessions(reports)
    out = _out(args)
    (out / "speedup_table.json").write_text(json.dumps(rows, indent=2))
    write_rows_csv(rows, out / "speedup_table.csv")
    _write_manifest(out, args)
    _emit(rows)


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pavc", description="Condition-aware video compression toolkit")
    ap.add_argument("--version", action="version", version=f"pavc {__version__}")
    ap.add_argument("--config", help="JSON file whose keys set defaults for the subcommand's flags")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="synthesize the six non-sunny conditions")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="directory of sunny images with YOLO .txt labels")
    src.add_argument("--synthetic", type=int, default=20, help="generate this many sunny scenes")
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--params", help="JSON file of augmentation parameters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="pavc-out/augment")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("fit-classifier", help="fit the condition classifier (75/15/10 split)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="output directory of `pavc augment`")
    src.add_argument("--synthetic", type=int, default=100)
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="pavc-out/classifier")
    p.set_defaults(func=cmd_fit_classifier)

    p = sub.add_parser("classify", help="classify images with a fitted model")
    p.add_argument("--classifier", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sweep", help="encode a clip at several CRFs")
    p.add_argument("--clip", help="sequence manifest (default: bundled synthetic clip)")
    p.add_argument("--crfs", default="0,10,21,40,51")
    p.add_argument("--encoder", help="ffmpeg executable")
    p.add_argument("--preset", default="medium")
    p.add_argument("--s-org-mode", choices=("raw", "crf0"), default="raw")
    p.add_argument("--out", default="pavc-out/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="find the largest CRF keeping mAP above threshold")
    p.add_argument("--oracle", help="synthetic:step@K or synthetic:ramp[@slope]")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--detector", help="detector adapter config JSON")
    p.add_argument("--condition", default="sunny", help="condition name/code, or 'all' to write a policy")
    p.add_argument("--threshold", type=float, default=0.985)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--crf-max", type=int, default=51)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--out", default="pavc-out/calibrate")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="mAP of detection files against ground truth")
    p.add_argument("--labels", required=True)
    p.add_argument("--detections")
    p.add_argument("--detector", help="run this adapter over --images first")
    p.add_argument("--images")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default="pavc-out/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("model", help="transmission-time model, speed-up and bandwidth reduction")
    p.add_argument("--s-org", type=float, required=True, help="original size, bytes")
    p.add_argument("--s-comp", type=float, required=True, help="compressed size, bytes")
    p.add_argument("--b-comp", type=float, required=True, help="compression bandwidth, MB/s")
    p.add_argument("--b-comm", type=float, required=True, help="link rate, Mbit/s")
    p.add_argument("--t-wd", type=float, default=0.0, help="classification time, s")
    p.add_argument("--ratios", help="comma list of compression ratios for a surface")
    p.add_argument("--b-comp-grid", help="comma list of compression bandwidths (MB/s) for a surface")
    p.add_argument("--rates", help="comma list of link rates (Mbit/s) for surfaces")
    p.add_argument("--out")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("send", help="camera side: classify, compress, transmit")
    p.add_argument("--dest", required=True, help="host:port")
    p.add_argument("--rate", type=float, required=True, help="emulated link rate, Mbit/s (<= 0: unthrottled)")
    p.add_argument("--policy")
    p.add_argument("--classifier")
    p.add_argument("--clip")
    p.add_argument("--condition", type=int, help="skip classification and use this code")
    p.add_argument("--baseline", action="store_true", help="send raw frames (uncompressed arm)")
    p.add_argument("--quantum", type=int, default=4096)
    p.add_argument("--encoder")
    p.add_argument("--report", help="write the session report JSON here")
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("recv", help="processing side: receive, decode, optionally detect")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--detector")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recv)

    p = sub.add_parser("report", help="collate sender session reports into a speed-up table")
    p.add_argument("sessions", nargs="+")
    p.add_argument("--out", default="pavc-out/report")
    p.set_defaults(func=cmd_report)
    return ap


SUBCOMMANDS = ("augment", "fit-classifier", "classify", "sweep", "calibrate", "eval", "model",
               "send", "recv", "report")
EXIT_UNKNOWN_COMMAND = 8


def _first_positional(argv):
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            next(it, None)
        elif not tok.startswith("-"):
            return tok
    return None


def _apply_config(parser, cfg):
    """Config keys become defaults on every subcommand that has the flag;
    flags given on the command line still win."""
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sub in subparsers.choices.values():
        known = {a.dest: a for a in sub._actions}
        values = {k: v for k, v in cfg.items() if k in known}
        for k in values:
            known[k].required = False
        sub.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            print(f"pavc: input error: cannot read config {known.config}: {exc}", file=sys.stderr)
            return 3
        _apply_config(parser, {k.replace("-", "_"): v for k, v in cfg.items()})
    command = _first_positional(argv)
    if command is not None and command not in SUBCOMMANDS:
        print(f"pavc: unknown subcommand {command!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return EXIT_UNKNOWN_COMMAND
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags and 0 for --help/--version
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PavcError as exc:
        print(f"pavc: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
