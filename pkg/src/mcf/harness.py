"""Dataset ingestion, evaluation metrics (miss rate vs false positives per
image), synthetic benchmark data, and timing benchmarks.

Annotations are CSV rows ``image_path,x,y,w,h[,ignore]`` relative to the
dataset root. A dataset directory holds ``images/`` plus ``annotations.csv``;
images without annotation rows count as negative images.
"""

import csv
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .channels import MODEL_WIN_H, triangle_filter
from .detector import DetectorConfig, detect, overlap
from .errors import ConfigError, DataError
from .image import load_image, save_ppm

MR2_REFS = 10.0 ** np.linspace(-2.0, 0.0, 9)
MR4_REFS = 10.0 ** np.linspace(-4.0, 0.0, 25)


@dataclass
class GTBox:
    x: float
    y: float
    w: float
    h: float
    ignore: bool = False


@dataclass
class Dataset:
    root: str
    images: list            # (relative path, (3, H, W) float32) pairs
    gt: dict                # path -> list[GTBox]
    missing: list = field(default_factory=list)


def load_annotations(path):
    """Parse ``image_path,x,y,w,h[,ignore]`` rows into a GroundTruth dict."""
    gt = {}
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) not in (5, 6):
                raise DataError(f"{path}:{lineno}: expected 5 or 6 fields, "
                                f"got {len(row)}")
            try:
                x, y, w, h = (float(v) for v in row[1:5])
                ignore = bool(int(row[5])) if len(row) == 6 else False
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            if w <= 0 or h <= 0:
                raise DataError(f"{path}:{lineno}: box must have positive area")
            gt.setdefault(row[0], []).append(GTBox(x, y, w, h, ignore))
    return gt


def save_annotations(path, gt):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for img_path in sorted(gt):
            for b in gt[img_path]:
                row = [img_path, b.x, b.y, b.w, b.h]
                if b.ignore:
                    row.append(1)
                writer.writerow(row)


def load_dataset(root):
    """Read a dataset directory; annotation rows referencing missing images
    are collected in Dataset.missing rather than aborting."""
    ann_path = os.path.join(root, "annotations.csv")
    gt = load_annotations(ann_path) if os.path.exists(ann_path) else {}
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise DataError(f"{root}: no images/ directory")
    images = []
    names = sorted(os.listdir(img_dir))
    for name in names:
        if not name.lower().endswith((".ppm", ".png")):
            continue
        rel = os.path.join("images", name)
        images.append((rel, load_image(os.path.join(root, rel))))
    have = {rel for rel, _ in images}
    missing = sorted(set(gt) - have)
    return Dataset(root, images, gt, missing)


def save_dataset(root, dataset):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    for rel, img in dataset.images:
        save_ppm(os.path.join(root, rel), img)
    save_annotations(os.path.join(root, "annotations.csv"), dataset.gt)


# ---------------------------------------------------------------------------
# matching and the evaluation curve


def match_detections(dets, gts, iou_min=0.5):
    """Greedy one-to-one matching of one image's detections to its boxes.

    dets: (box, score) pairs. Each detection (highest score first) claims the
    highest-IoU unmatched non-ignore box with IoU >= iou_min; failing that,
    an ignore box may absorb it (neither TP nor FP). Returns
    (tp_scores, fp_scores, misses).
    """
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i][1],) + tuple(dets[i][0]))
    real = [g for g in gts if not g.ignore]
    ignores = [g for g in gts if g.ignore]
    claimed = [False] * len(real)
    tp, fp = [], []
    for i in order:
        box, score = dets[i]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(real):
            if claimed[j]:
                continue
            v = overlap(box, (g.x, g.y, g.w, g.h))
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_min:
            claimed[best_j] = True
            tp.append(score)
            continue
        if any(overlap(box, (g.x, g.y, g.w, g.h)) >= iou_min for g in ignores):
            continue
        fp.append(score)
    misses = claimed.count(False)
    return tp, fp, misses


@dataclass
class EvalCurve:
    points: list            # (fppi, miss_rate), fppi ascending
    mr_log_avg_2: float
    mr_log_avg_4: float


def _sample_step(points, ref):
    # miss rate of the largest fppi <= ref; 1.0 when no such point exists
    best = None
    for fppi, miss in points:
        if fppi <= ref:
            best = miss
        else:
            break
    return 1.0 if best is None else best


def compute_curve(records, n_images, n_gt):
    """Threshold-sweep miss-rate curve plus its log-spaced averages.

    records: (score, is_tp) for every counted detection across the whole
    image set. The curve is a step function over fppi; the two summary
    numbers average the sampled miss rate at 9 (25) log-uniform fppi
    reference points over [1e-2, 1] ([1e-4, 1]).
    """
    if n_images < 1:
        raise ConfigError("need at least one image")
    if n_gt < 1:
        raise DataError("need at least one non-ignore annotation")
    recs = sorted(records, key=lambda r: -r[0])
    points = []
    tp = fp = 0
    i = 0
    while i < len(recs):
        j = i
        while j < len(recs) and recs[j][0] == recs[i][0]:
            tp += recs[j][1]
            fp += not recs[j][1]
            j += 1
        i = j
        points.append((fp / n_images, 1.0 - tp / n_gt))
    # collapse duplicate fppi values to their final (lowest) miss rate
    dedup = {}
    for fppi, miss in points:
        dedup[fppi] = miss
    points = sorted(dedup.items())
    mr2 = float(np.mean([_sample_step(points, r) for r in MR2_REFS]))
    mr4 = float(np.mean([_sample_step(points, r) for r in MR4_REFS]))
    return EvalCurve(points, mr2, mr4)


def evaluate_detections(dets_by_image, gt, n_images, iou_min=0.5):
    """Match every image and compute the curve over the whole set."""
    records = []
    n_gt = 0
    misses = 0
    for path, boxes in gt.items():
        n_gt += sum(not b.ignore for b in boxes)
    for path, dets in dets_by_image.items():
        tp, fp, m = match_detections(dets, gt.get(path, []), iou_min)
        records.extend((s, True) for s in tp)
        records.extend((s, False) for s in fp)
        misses += m
    return compute_curve(records, n_images, n_gt)


# ---------------------------------------------------------------------------
# synthetic pedestrian-like data

_DIFFICULTY = {
    "easy": dict(size=(240, 320), ped_h=(MODEL_WIN_H, 200), max_peds=2,
                 clutter=5, distractors=3, occlusion=0.15, noise=0.03),
    "medium": dict(size=(320, 448), ped_h=(MODEL_WIN_H, 288), max_peds=3,
                   clutter=9, distractors=5, occlusion=0.25, noise=0.04),
    "hard": dict(size=(448, 576), ped_h=(MODEL_WIN_H, 3 * MODEL_WIN_H),
                 max_peds=3, clutter=14, distractors=8, occlusion=0.35,
                 noise=0.05),
}


def _seg_dist(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    denom = dy * dy + dx * dx
    if denom == 0:
        return np.hypot(yy - y0, xx - x0)
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / denom, 0.0, 1.0)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def _render_pedestrian(rng, box_h, bg_color):
    """Bilaterally symmetric figure with limb jitter inside a 2:1 box.

    Returns (rgb (3, h, w), alpha (h, w)); the figure spans ~80-90% of the
    box height. Contrast against bg_color, clothing texture and pose all
    jitter so the class is not separable by a couple of channel lookups.
    """
    h = int(box_h)
    w = h // 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hp = rng.uniform(0.78, 0.9) * h
    top = rng.uniform(0.03, 0.08) * h
    cx = w / 2.0 + rng.uniform(-0.02, 0.02) * hp

    # low-contrast figures: pull clothing toward the background color
    blend = rng.uniform(0.0, 0.5)
    skin = np.clip(np.array([0.85, 0.66, 0.5]) + rng.normal(0, 0.05, 3), 0, 1)
    shirt = rng.uniform(0.08, 0.92, 3) * (1 - blend) + bg_color * blend
    pants = rng.uniform(0.05, 0.6, 3) * (1 - blend) + bg_color * blend
    if rng.random() < 0.2:  # hood / hat
        skin = shirt

    head_cy = top + 0.095 * hp
    head = (((xx - cx) / (0.075 * hp)) ** 2
            + ((yy - head_cy) / (0.09 * hp)) ** 2) <= 1.0

    y_sh, y_hip = top + 0.19 * hp, top + 0.52 * hp
    t = np.clip((yy - y_sh) / (y_hip - y_sh), 0.0, 1.0)
    hw = (rng.uniform(0.13, 0.17) - 0.045 * t) * hp
    torso = (np.abs(xx - cx) <= hw) & (yy >= y_sh) & (yy <= y_hip)
    neck = (np.abs(xx - cx) <= 0.04 * hp) & (yy >= head_cy) & (yy <= y_sh)

    arms = np.zeros((h, w), dtype=bool)
    legs = np.zeros((h, w), dtype=bool)
    long_coat = rng.random() < 0.18  # no leg gap
    for side in (-1.0, 1.0):
        swing = rng.uniform(0.0, 0.07) * hp
        arms |= _seg_dist(yy, xx, y_sh + 0.03 * hp, cx + side * 0.155 * hp,
                          top + rng.uniform(0.42, 0.5) * hp,
                          cx + side * (0.155 * hp + swing)) <= 0.034 * hp
        sway = rng.uniform(-0.02, 0.06) * hp
        legs |= _seg_dist(yy, xx, y_hip, cx + side * 0.065 * hp,
                          top + 0.985 * hp, cx + side * (0.065 * hp + sway)) \
            <= 0.048 * hp
    if long_coat:
        y_knee = top + 0.78 * hp
        legs |= (np.abs(xx - cx) <= 0.12 * hp) & (yy >= y_hip) & (yy <= y_knee)

    rgb = np.zeros((3, h, w))
    alpha = np.zeros((h, w))
    for mask, color in ((legs, pants), (arms, shirt), (torso, shirt),
                        (neck, skin), (head, skin)):
        rgb[:, mask] = color[:, None]
        alpha[mask] = 1.0
    # clothing texture
    rgb += rng.normal(0.0, rng.uniform(0.01, 0.06), (3, h, w))
    if rng.random() < 0.3:  # horizontal stripes on the shirt
        stripe = (np.sin(yy * rng.uniform(0.3, 1.2)) > 0) & torso
        rgb[:, stripe] += rng.uniform(-0.25, 0.25)
    rgb = np.clip(rgb, 0.0, 1.0)
    alpha = np.clip(triangle_filter(alpha, 1), 0.0, 1.0)
    return rgb, alpha


def _render_distractor(rng, box_h, bg_color):
    """Vertical pedestrian-ish shape with wrong proportions (pole with a
    round top, headless torso, overly wide or thin figure); the hard
    negatives the detector must learn to reject."""
    h = int(box_h)
    w = max(8, h // 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = w / 2.0
    color = rng.uniform(0.05, 0.95, 3)
    blend = rng.uniform(0.0, 0.4)
    color = color * (1 - blend) + bg_color * blend
    kind = rng.integers(0, 3)
    alpha = np.zeros((h, w))
    if kind == 0:  # pole with round top
        r = rng.uniform(0.03, 0.08) * h
        alpha[(np.abs(xx - cx) <= r * 0.6) & (yy >= 0.1 * h)] = 1.0
        alpha[((xx - cx) ** 2 + (yy - 0.1 * h) ** 2) <= (1.6 * r) ** 2] = 1.0
    elif kind == 1:  # headless slab, roughly torso-shaped
        hw = rng.uniform(0.1, 0.24) * h
        alpha[(np.abs(xx - cx) <= hw) & (yy >= 0.15 * h) & (yy <= 0.95 * h)] = 1.0
    else:  # two bars, leg-like but no body
        for side in (-1.0, 1.0):
            alpha[np.abs(xx - (cx + side * rng.uniform(0.05, 0.1) * h))
                  <= 0.04 * h] = 1.0
    rgb = np.zeros((3, h, w))
    rgb[:, alpha > 0] = color[:, None]
    rgb += rng.normal(0.0, 0.03, (3, h, w))
    rgb = np.clip(rgb, 0.0, 1.0)
    alpha = np.clip(triangle_filter(alpha, 1), 0.0, 1.0)
    return rgb, alpha


def _paste(img, rgb, alpha, y, x):
    h, w = alpha.shape
    img[:, y:y + h, x:x + w] *= (1.0 - alpha)
    img[:, y:y + h, x:x + w] += rgb * alpha


def _render_image(rng, params):
    ih, iw = params["size"]
    n_peds = int(rng.integers(0, params["max_peds"] + 1))

    ped_boxes = []
    for _ in range(n_peds):
        for _attempt in range(20):
            hmax = min(params["ped_h"][1], ih - 8)
            bh = int(rng.integers(params["ped_h"][0], hmax + 1))
            bw = bh // 2
            x = int(rng.integers(4, iw - bw - 3))
            y = int(rng.integers(4, ih - bh - 3))
            box = (x, y, bw, bh)
            if all(overlap(box, b) < 0.1 for b in ped_boxes):
                ped_boxes.append(box)
                break

    # textured background: per-channel base + coarse blobs + fine noise
    base = rng.uniform(0.3, 0.7, 3)[:, None, None]
    coarse = rng.normal(0.0, 0.1, (3, ih // 32 + 2, iw // 32 + 2))
    cy = np.linspace(0, coarse.shape[1] - 1, ih)
    cx = np.linspace(0, coarse.shape[2] - 1, iw)
    yi, xi = cy.astype(int), cx.astype(int)
    yi1 = np.minimum(yi + 1, coarse.shape[1] - 1)
    xi1 = np.minimum(xi + 1, coarse.shape[2] - 1)
    fy = (cy - yi)[None, :, None]
    fx = (cx - xi)[None, None, :]
    blob = ((coarse[:, yi][:, :, xi] * (1 - fy) + coarse[:, yi1][:, :, xi] * fy)
            * (1 - fx)
            + (coarse[:, yi][:, :, xi1] * (1 - fy)
               + coarse[:, yi1][:, :, xi1] * fy) * fx)
    img = base + blob + rng.normal(0.0, params["noise"], (3, ih, iw))

    # generic clutter that avoids the pedestrian boxes
    for _ in range(params["clutter"]):
        kind = rng.integers(0, 3)
        cw = int(rng.integers(8, max(9, iw // 4)))
        ch = int(rng.integers(8, max(9, ih // 3)))
        if kind == 2:  # vertical bar
            cw = int(rng.integers(6, 24))
            ch = int(rng.integers(ih // 3, ih - 8))
        x = int(rng.integers(0, max(1, iw - cw)))
        y = int(rng.integers(0, max(1, ih - ch)))
        color = rng.uniform(0.05, 0.95, 3)[:, None, None]
        mix = rng.uniform(0.5, 1.0)
        if any(overlap((x, y, cw, ch), b) > 0.2 for b in ped_boxes):
            continue
        if kind == 1:  # ellipse
            yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float64)
            m = (((xx - cw / 2) / (cw / 2)) ** 2
                 + ((yy - ch / 2) / (ch / 2)) ** 2) <= 1.0
            region = img[:, y:y + ch, x:x + cw]
            region[:, m] = region[:, m] * (1 - mix) + color[:, :, 0] * mix
        else:
            img[:, y:y + ch, x:x + cw] *= (1 - mix)
            img[:, y:y + ch, x:x + cw] += color * mix

    # pedestrian-like distractors (never counted as ground truth)
    bg_mean = img.mean(axis=(1, 2))
    for _ in range(params["distractors"]):
        dh = int(rng.integers(params["ped_h"][0], min(params["ped_h"][1],
                                                      ih - 8) + 1))
        dw = max(8, dh // 2)
        if dw >= iw:
            continue
        x = int(rng.integers(0, iw - dw))
        y = int(rng.integers(0, ih - dh))
        if any(overlap((x, y, dw, dh), b) > 0.15 for b in ped_boxes):
            continue
        rgb, alpha = _render_distractor(rng, dh, bg_mean)
        _paste(img, rgb, alpha, y, x)

    boxes = []
    for (x, y, bw, bh) in ped_boxes:
        rgb, alpha = _render_pedestrian(rng, bh, bg_mean)
        _paste(img, rgb, alpha, y, x)
        boxes.append(GTBox(float(x), float(y), float(bw), float(bh)))

    # occasional occluder over a pedestrian
    for (x, y, bw, bh) in ped_boxes:
        if rng.random() < params["occlusion"]:
            ow_ = int(rng.integers(bw // 2, bw + 1))
            oh_ = int(rng.integers(bh // 6, bh // 3))
            oy_ = int(rng.integers(y + bh // 3, y + bh - oh_))
            ox_ = int(np.clip(rng.integers(x - bw // 4, x + bw), 0, iw - ow_))
            color = rng.uniform(0.1, 0.9, 3)[:, None, None]
            img[:, oy_:oy_ + oh_, ox_:ox_ + ow_] = color

    # global illumination gradient
    direction = rng.integers(0, 2)
    ramp = np.linspace(rng.uniform(0.82, 1.0), rng.uniform(1.0, 1.18),
                       ih if direction == 0 else iw)
    img *= ramp[None, :, None] if direction == 0 else ramp[None, None, :]

    return np.clip(img, 0.0, 1.0).astype(np.float32), boxes


def synth_dataset(seed, n_train, n_test, difficulty="easy"):
    """Deterministic synthetic pedestrian scenes.

    Returns (train Dataset, test Dataset); both drawn from one seeded stream
    so any (seed, n_train, n_test, difficulty) tuple is reproducible bit for
    bit.
    """
    if difficulty not in _DIFFICULTY:
        raise ConfigError(f"unknown difficulty {difficulty!r}")
    params = _DIFFICULTY[difficulty]
    rng = np.random.default_rng(seed)

    def make(count, prefix):
        images, gt = [], {}
        for i in range(count):
            img, boxes = _render_image(rng, params)
            rel = os.path.join("images", f"{prefix}_{i:05d}.ppm")
            images.append((rel, img))
            if boxes:
                gt[rel] = boxes
        return Dataset("", images, gt)

    return make(n_train, "train"), make(n_test, "test")


# ---------------------------------------------------------------------------
# benchmark


def bench(entries, weights, dataset, iou_min=0.5, parallel_workers=None):
    """Timing + accuracy table over detector configurations.

    entries: dicts {name, model, config}. The first entry is the speed
    baseline. Detection runs single-threaded for timing; pass
    parallel_workers to report a second, parallel timing column.
    """
    if not entries:
        raise ConfigError("bench needs at least one entry")
    rows = []
    base_median = None
    for entry in entries:
        model, config = entry["model"], entry["config"]
        per_image = []
        dets_by_image = {}
        agg = None
        for path, img in dataset.images:
            t0 = time.perf_counter()
            dets, stats = detect(img, model, weights, config)
            per_image.append(time.perf_counter() - t0)
            dets_by_image[path] = [(d.bbox, d.score) for d in dets]
            if agg is None:
                agg = stats.to_dict()
            else:
                for k in ("entering", "rejected", "pruned_after"):
                    agg[k] = [a + b for a, b in zip(agg[k], stats.to_dict()[k])]
        curve = evaluate_detections(dets_by_image, dataset.gt,
                                    len(dataset.images), iou_min)
        med = statistics.median(per_image)
        if base_median is None:
            base_median = med
        row = {
            "name": entry["name"],
            "mr2": curve.mr_log_avg_2,
            "mr4": curve.mr_log_avg_4,
            "median_seconds": med,
            "speedup_vs_baseline": base_median / med if med > 0 else math.inf,
            "entering": agg["entering"],
            "rejected": agg["rejected"],
            "rejection_ratio": [r / e if e else 0.0 for r, e in
                                zip(agg["rejected"], agg["entering"])],
            "pruned_after": agg["pruned_after"],
        }
        if parallel_workers:
            pcfg = DetectorConfig(**{**config.__dict__,
                                     "workers": parallel_workers})
            par = []
            for path, img in dataset.images:
                t0 = time.perf_counter()
                detect(img, model, weights, pcfg)
                par.append(time.perf_counter() - t0)
            row["median_seconds_parallel"] = statistics.median(par)
        rows.append(row)
    return {"rows": rows}


def write_detections_csv(path, dets_by_image):
    """One ``image_path,x,y,w,h,score,stage_reached`` row per detection."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for img_path in sorted(dets_by_image):
            for d in dets_by_image[img_path]:
                x, y, w, h = d.bbox
                writer.writerow([img_path, repr(x), repr(y), repr(w), repr(h),
                                 repr(d.score), d.stage_reached])


def read_detections_csv(path):
    """Detections grouped by image as (box, score) pairs."""
    dets = {}
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 fields")
            try:
                box = tuple(float(v) for v in row[1:5])
                score = float(row[5])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            dets.setdefault(row[0], []).append((box, score))
    return dets
