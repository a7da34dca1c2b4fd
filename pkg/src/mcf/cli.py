"""Command line interface: train, detect, eval, bench, synth, inspect-model.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

import argparse
import json
import logging
import math
import os
import sys

from . import cascade, convnet, detector, harness
from ._backend import backend_name
from .errors import ConfigError, DataError
from .image import load_image


def _theta(value):
    if value is None or str(value).lower() in ("off", "inf", "none"):
        return None
    return float(value)


def _widths(value):
    return tuple(int(v) for v in value.split(","))


def _blocks(value):
    # "c2,c3,c5" or "2,3,5"
    return tuple(int(v.strip().lstrip("cC")) for v in value.split(","))


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mcf",
        description="Multilayer channel features detector "
                    f"(kernel backend: {backend_name()})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--difficulty", choices=sorted(harness._DIFFICULTY),
                   default="easy")

    p = sub.add_parser("train", help="train a cascade model")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", help="backbone weights file; generated from "
                                     "--seed when omitted")
    p.add_argument("--weights-out", help="where to write generated weights "
                                         "(default: <out>.mcfw)")
    p.add_argument("--widths", type=_widths, default=convnet.DEFAULT_WIDTHS,
                   help="conv widths for generated weights, e.g. 8,16,32,48,48")
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--trees", type=int, default=256)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--shrink", type=int, choices=(1, 2, 4), default=4)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--layers", type=_blocks, default=None,
                   help="conv blocks for stages 2..N, e.g. c1,c2,c3,c4,c5")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--calibration", choices=("min-positive", "quantile"),
                   default=None)
    p.add_argument("--quantile-q", type=float, default=None)
    p.add_argument("--config", help="JSON file of TrainConfig overrides")

    p = sub.add_parser("detect", help="run the detector over images")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", action="append", default=[],
                   help="repeatable; or use --dataset")
    p.add_argument("--dataset")
    p.add_argument("--theta", type=_theta, default=None,
                   help="early-NMS overlap threshold, or 'off'")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--scales-per-octave", type=int, default=8)
    p.add_argument("--score-floor", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stats", help="write the stage statistics report here")

    p = sub.add_parser("eval", help="score a detections file against "
                                    "annotations")
    _add_common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--n-images", type=int, default=None,
                   help="total images in the test set (default: images "
                        "appearing in the annotation file)")
    p.add_argument("--iou", type=float, default=0.5)

    p = sub.add_parser("bench", help="compare configurations on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--entry", action="append", required=True,
                   help="name=model.json[:theta], repeatable; first entry "
                        "is the speed baseline")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--scales-per-octave", type=int, default=8)
    p.add_argument("--parallel", type=int, default=None,
                   help="also time with this many workers")

    p = sub.add_parser("inspect-model", help="summarize a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--out", default="-")
    return ap


def _write_output(path, text):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_synth(args):
    train, test = harness.synth_dataset(args.seed, args.n_train, args.n_test,
                                        args.difficulty)
    harness.save_dataset(os.path.join(args.out, "train"), train)
    harness.save_dataset(os.path.join(args.out, "test"), test)
    print(f"wrote {args.n_train} train / {args.n_test} test images to {args.out}")
    return 0


def _train_config(args):
    if args.preset == "desk":
        cfg = cascade.desk_config()
    else:
        cfg = cascade.TrainConfig()
    overrides = {}
    if args.config:
        with open(args.config) as f:
            overrides.update(json.load(f))
    overrides.setdefault("n_all", args.trees)
    overrides.setdefault("n_stages", args.stages)
    overrides.setdefault("tree_depth", args.depth)
    overrides.setdefault("shrink", args.shrink)
    overrides.setdefault("stride", args.stride)
    overrides.setdefault("seed", args.seed)
    if args.layers is not None:
        overrides.setdefault("conv_blocks", args.layers)
    if args.calibration is not None:
        overrides.setdefault("calibration", args.calibration)
    if args.quantile_q is not None:
        overrides.setdefault("quantile_q", args.quantile_q)
    merged = {**cfg.__dict__, **overrides}
    if "bootstrap_rounds" in merged:
        merged["bootstrap_rounds"] = tuple(merged["bootstrap_rounds"])
    return cascade.TrainConfig(**merged)


def cmd_train(args):
    config = _train_config(args)
    dataset = harness.load_dataset(args.dataset)
    if dataset.missing:
        raise DataError(f"annotations reference missing images: "
                        f"{', '.join(dataset.missing[:5])}")
    if args.weights:
        weights = convnet.load_weights(args.weights)
    else:
        weights = convnet.random_weights(convnet.default_backbone(args.widths),
                                         args.seed)
        wpath = args.weights_out or args.out + ".mcfw"
        convnet.save_weights(wpath, weights)
        print(f"wrote generated backbone weights to {wpath}")
    model = cascade.train_multistage(dataset, weights, config)
    cascade.save_model(args.out, model)
    print(f"wrote model to {args.out}")
    return 0


def _detector_config(args):
    return detector.DetectorConfig(
        stride=args.stride, theta=args.theta,
        score_floor=getattr(args, "score_floor", None),
        scales_per_octave=args.scales_per_octave,
        workers=getattr(args, "workers", 1))


def cmd_detect(args):
    model = cascade.load_model(args.model)
    weights = convnet.load_weights(args.weights)
    config = _detector_config(args)
    images = [(p, load_image(p)) for p in args.image]
    if args.dataset:
        ds = harness.load_dataset(args.dataset)
        images.extend((os.path.join(args.dataset, rel), img)
                      for rel, img in ds.images)
    if not images:
        raise ConfigError("no input images: pass --image or --dataset")
    dets_by_image = {}
    reports = {}
    for path, img in images:
        dets, stats = detector.detect(img, model, weights, config)
        dets_by_image[path] = dets
        reports[path] = stats.to_dict()
        print(f"{path}: {len(dets)} detections")
        print(stats.table())
    if args.format == "json":
        payload = {p: [{"bbox": list(d.bbox), "score": d.score,
                        "stage_reached": d.stage_reached, "scale": d.scale}
                       for d in ds_] for p, ds_ in dets_by_image.items()}
        _write_output(args.out, json.dumps(payload, sort_keys=True, indent=1))
    else:
        harness.write_detections_csv(args.out, dets_by_image)
    if args.stats:
        _write_output(args.stats, json.dumps(reports, sort_keys=True, indent=1))
    return 0


def cmd_eval(args):
    dets = harness.read_detections_csv(args.detections)
    gt = harness.load_annotations(args.annotations)
    n_images = args.n_images if args.n_images else len(gt)
    curve = harness.evaluate_detections(dets, gt, n_images, args.iou)
    print(f"MR-2 {curve.mr_log_avg_2:.4f}  MR-4 {curve.mr_log_avg_4:.4f} "
          f"({len(curve.points)} curve points over {n_images} images)")
    if args.format == "json":
        _write_output(args.out, json.dumps(
            {"mr2": curve.mr_log_avg_2, "mr4": curve.mr_log_avg_4,
             "points": curve.points}, indent=1))
    else:
        lines = ["fppi,miss_rate"]
        lines += [f"{f!r},{m!r}" for f, m in curve.points]
        _write_output(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_bench(args):
    dataset = harness.load_dataset(args.dataset)
    weights = convnet.load_weights(args.weights)
    entries = []
    for raw in args.entry:
        if "=" not in raw:
            raise ConfigError(f"--entry must be name=model.json[:theta]: {raw}")
        name, rest = raw.split("=", 1)
        theta = None
        if ":" in rest:
            rest, theta_s = rest.rsplit(":", 1)
            theta = _theta(theta_s)
        entries.append({
            "name": name,
            "model": cascade.load_model(rest),
            "config": detector.DetectorConfig(
                stride=args.stride, theta=theta,
                scales_per_octave=args.scales_per_octave),
        })
    report = harness.bench(entries, weights, dataset,
                           parallel_workers=args.parallel)
    if args.format == "json":
        _write_output(args.out, json.dumps(report, sort_keys=True, indent=1))
    else:
        cols = ["name", "mr2", "median_seconds", "speedup_vs_baseline"]
        lines = [",".join(cols)]
        for row in report["rows"]:
            lines.append(",".join(str(row[c]) for c in cols))
        _write_output(args.out, "\n".join(lines) + "\n")
    for row in report["rows"]:
        print(f"{row['name']}: MR-2 {row['mr2']:.4f}  median "
              f"{row['median_seconds']:.3f}s  speedup "
              f"{row['speedup_vs_baseline']:.2f}x  rejection "
              f"{['%.2f' % r for r in row['rejection_ratio']]}")
    return 0


def cmd_inspect_model(args):
    model = cascade.load_model(args.model)
    kinds = {}
    for stage in model.stages:
        for tree in stage.trees:
            for spec in tree.features:
                if spec is not None:
                    kinds[spec.kind] = kinds.get(spec.kind, 0) + 1
    summary = {
        "plan": {"n_all": model.plan.n_all, "n_stages": model.plan.n_stages,
                 "k": model.plan.k},
        "depth": model.depth,
        "shrink": model.shrink,
        "l1_geometry": list(model.l1_geometry),
        "conv_blocks": list(model.conv_blocks),
        "backbone_hash": model.backbone_hash,
        "stage_sources": [s.source for s in model.stages],
        "trees_per_stage": [len(s.trees) for s in model.stages],
        "feature_kinds": kinds,
        "reject_threshold_range": [
            [float(min(s.reject_thresholds)), float(max(s.reject_thresholds))]
            for s in model.stages],
    }
    _write_output(args.out, json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect-model": cmd_inspect_model,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
