"""Staged sliding-window detection: scan the first layer everywhere, reject
per tree with the soft cascade, compute deeper conv layers only for windows
still alive, optionally prune highly overlapped windows right after stage 1,
then merge survivors with NMS.

All orderings (scan order, NMS tie-breaks) are deterministic so results do
not depend on the worker count.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .cascade import score as cascade_score  # noqa: F401  (re-export for callers)
from .channels import (MODEL_WIN_H, MODEL_WIN_W, ChannelStack, PyramidSpec,
                       build_pyramid)
from .convnet import MultiLayerChannels
from .errors import ConfigError, InvalidInputError

_DUMMY_TABLES = np.zeros((1, 2, 2), dtype=np.float64)


@dataclass
class Detection:
    bbox: tuple          # (x, y, w, h), original-image pixels, clipped
    score: float
    stage_reached: int
    scale: float


@dataclass
class Window:
    """Internal scan result; bbox is unclipped original-image coordinates."""
    level: int
    cell_y: int          # origin in first-layer cells at its pyramid level
    cell_x: int
    score: float
    bbox: tuple
    scale: float


@dataclass
class DetectorConfig:
    stride: int = 4              # original-image pixels at scale 1
    theta: float = None          # early-NMS overlap; None or inf disables
    final_nms: float = 0.5
    score_floor: float = None
    scales_per_octave: int = 8
    workers: int = 1

    def theta_enabled(self):
        return self.theta is not None and math.isfinite(self.theta)


@dataclass
class StageStats:
    """Window bookkeeping per stage; counts balance exactly:
    entering[i+1] = entering[i] - rejected[i] - pruned_after[i]."""

    entering: list
    rejected: list
    pruned_after: list
    seconds: list
    pyramid_seconds: float = 0.0
    nms_seconds: float = 0.0
    total_seconds: float = 0.0
    final_detections: int = 0

    @classmethod
    def empty(cls, n_stages):
        z = lambda: [0] * n_stages  # noqa: E731
        return cls(z(), z(), z(), [0.0] * n_stages)

    def ratios(self):
        return [r / e if e else 0.0 for r, e in zip(self.rejected, self.entering)]

    def to_dict(self):
        return {
            "entering": list(self.entering),
            "rejected": list(self.rejected),
            "rejection_ratio": self.ratios(),
            "pruned_after": list(self.pruned_after),
            "stage_seconds": list(self.seconds),
            "pyramid_seconds": self.pyramid_seconds,
            "nms_seconds": self.nms_seconds,
            "total_seconds": self.total_seconds,
            "final_detections": self.final_detections,
        }

    def table(self):
        lines = ["stage  entering  rejected  ratio   pruned  seconds"]
        for i in range(len(self.entering)):
            lines.append(
                f"S{i + 1:<4d} {self.entering[i]:9d} {self.rejected[i]:9d} "
                f"{self.ratios()[i]:6.1%} {self.pruned_after[i]:8d} "
                f"{self.seconds[i]:8.3f}")
        lines.append(f"pyramid {self.pyramid_seconds:.3f}s  nms "
                     f"{self.nms_seconds:.3f}s  total {self.total_seconds:.3f}s  "
                     f"detections {self.final_detections}")
        return "\n".join(lines)


def overlap(w1, w2):
    """Intersection area over union area of two (x, y, w, h) boxes."""
    x1, y1, a1, b1 = w1
    x2, y2, a2, b2 = w2
    if a1 <= 0 or b1 <= 0 or a2 <= 0 or b2 <= 0:
        raise InvalidInputError("boxes must have positive area")
    ix = min(x1 + a1, x2 + a2) - max(x1, x2)
    iy = min(y1 + b1, y2 + b2) - max(y1, y2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a1 * b1 + a2 * b2 - inter)


def _nms_key(get_box, get_score, get_scale):
    def key(item):
        x, y, _, _ = get_box(item)
        return (-get_score(item), x, y, get_scale(item))
    return key


def _greedy_nms(items, thr, get_box, get_score, get_scale):
    """Keep an item iff it overlaps every already-kept item at most thr;
    processed in (score desc, x, y, scale) order."""
    ordered = sorted(items, key=_nms_key(get_box, get_score, get_scale))
    kept = []
    boxes = np.empty((len(ordered), 4))
    n_kept = 0
    for item in ordered:
        x, y, w, h = get_box(item)
        if n_kept:
            b = boxes[:n_kept]
            ix = np.minimum(b[:, 0] + b[:, 2], x + w) - np.maximum(b[:, 0], x)
            iy = np.minimum(b[:, 1] + b[:, 3], y + h) - np.maximum(b[:, 1], y)
            inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
            union = b[:, 2] * b[:, 3] + w * h - inter
            if (inter / union > thr).any():
                continue
        boxes[n_kept] = (x, y, w, h)
        n_kept += 1
        kept.append(item)
    return kept


def early_nms(windows, theta):
    """Prune highly overlapped lower-scored windows after stage 1.

    theta of None or inf is the OFF sentinel: the input comes back unchanged.
    """
    if theta is None or not math.isfinite(theta):
        return list(windows)
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must be in (0, 1], got {theta}")
    return _greedy_nms(windows, theta, lambda w: w.bbox, lambda w: w.score,
                       lambda w: w.scale)


def final_nms(detections, threshold=0.5):
    """Merge detections with the same greedy rule at the standard threshold."""
    return _greedy_nms(detections, threshold, lambda d: d.bbox,
                       lambda d: d.score, lambda d: d.scale)


def pyramid_for(image, model, config):
    spec = PyramidSpec(scales_per_octave=config.scales_per_octave,
                       shrink=model.shrink)
    return build_pyramid(image, spec, workers=config.workers)


def _scan_level(level_idx, level, model, config, packed):
    win_c, win_h, win_w = model.l1_geometry
    step = config.stride // model.shrink
    planes = level.channels.data
    if planes.shape[1] < win_h or planes.shape[2] < win_w:
        return [], 0, 0
    tables = level.channels.tables() if packed.has_rect else _DUMMY_TABLES
    ny = (planes.shape[1] - win_h) // step + 1
    nx = (planes.shape[2] - win_w) // step + 1
    cum0 = np.zeros((ny, nx), dtype=np.float64)
    scores, stop = kernels.scan_cascade(
        planes, tables, win_h, win_w, step, step,
        packed.kind, packed.chan, packed.chan_b, packed.rect, packed.rect_b,
        packed.thr, packed.pol, packed.leaf, packed.reject, 0, cum0, True)
    survivors = []
    s = level.scale
    shrink = model.shrink
    for gy, gx in zip(*np.nonzero(stop == -1)):
        cy, cx = int(gy) * step, int(gx) * step
        bbox = (cx * shrink / s, cy * shrink / s,
                MODEL_WIN_W / s, MODEL_WIN_H / s)
        survivors.append(Window(level_idx, cy, cx, float(scores[gy, gx]),
                                bbox, s))
    return survivors, ny * nx, int((stop != -1).sum())


def scan_stage1(pyramid, model, config):
    """Evaluate stage 1 on every stride-aligned window of every level.

    Returns (surviving windows in scan order, windows entered, windows
    rejected)."""
    if config.stride % model.shrink:
        raise ConfigError("stride must be a multiple of the model's shrink")
    packed = model.packed()[0]
    if config.workers > 1 and len(pyramid) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                lambda il: _scan_level(il[0], il[1], model, config, packed),
                enumerate(pyramid)))
    else:
        results = [_scan_level(i, lv, model, config, packed)
                   for i, lv in enumerate(pyramid)]
    windows = []
    entering = 0
    rejected = 0
    for wins, ent, rej in results:
        windows.extend(wins)
        entering += ent
        rejected += rej
    return windows, entering, rejected


def crop_window(level, cell_y, cell_x, shrink):
    """128x64 RGB crop of a window from its pyramid level, replicating the
    couple of border pixels a shrink-padded level may lack."""
    py, px = cell_y * shrink, cell_x * shrink
    img = level.image
    crop = img[:, py:py + MODEL_WIN_H, px:px + MODEL_WIN_W]
    dh = MODEL_WIN_H - crop.shape[1]
    dw = MODEL_WIN_W - crop.shape[2]
    if dh or dw:
        crop = np.pad(crop, ((0, 0), (0, dh), (0, dw)), mode="edge")
    return np.ascontiguousarray(crop, dtype=np.float32)


def window_channels(pyramid, window, model, weights, through_stage=None):
    """MultiLayerChannels for one scanned window: layer 1 bound to the shared
    pyramid stack, conv layers computed from the window crop."""
    level = pyramid[window.level]
    mlc = MultiLayerChannels(
        window_id=(window.level, window.cell_y, window.cell_x),
        crop=crop_window(level, window.cell_y, window.cell_x, model.shrink))
    mlc.set_layer(1, level.channels, oy=window.cell_y, ox=window.cell_x)
    last = model.n_stages if through_stage is None else through_stage
    for si in range(1, last):
        stage = model.stages[si]
        block = model.conv_blocks[si - 1]
        data = mlc.conv_block(block, weights)
        mlc.set_layer(stage.layer_index, ChannelStack(stage.layer_index, data))
    return mlc


def _eval_window_stages(window, pyramid, model, weights, packed, seconds):
    """Run stages 2..N for one window; returns (final score, stage reached,
    accepted)."""
    level = pyramid[window.level]
    mlc = MultiLayerChannels(
        window_id=(window.level, window.cell_y, window.cell_x),
        crop=crop_window(level, window.cell_y, window.cell_x, model.shrink))
    cum = window.score
    for si in range(1, model.n_stages):
        t0 = time.perf_counter()
        stage = model.stages[si]
        block = model.conv_blocks[si - 1]
        data = mlc.conv_block(block, weights)
        stack = ChannelStack(stage.layer_index, data)
        mlc.set_layer(stage.layer_index, stack)
        p = packed[si]
        tables = stack.tables() if p.has_rect else _DUMMY_TABLES
        cum0 = np.full((1, 1), cum, dtype=np.float64)
        scores, stop = kernels.scan_cascade(
            np.ascontiguousarray(data, dtype=np.float32), tables,
            data.shape[1], data.shape[2], 1, 1,
            p.kind, p.chan, p.chan_b, p.rect, p.rect_b, p.thr, p.pol, p.leaf,
            p.reject, 0, cum0, True)
        cum = float(scores[0, 0])
        seconds[si] += time.perf_counter() - t0
        if stop[0, 0] != -1:
            mlc.release()
            return cum, si + 1, False
    return cum, model.n_stages, True


def run_remaining_stages(pyramid, survivors, model, weights, config, stats):
    """Stages 2..N with lazy per-window conv layers and per-tree early exit.

    Returns accepted windows as (window, final score) pairs; updates stats
    counts and timings in place."""
    n_stages = model.n_stages
    packed = model.packed()
    alive = list(survivors)

    def run(window):
        return _eval_window_stages(window, pyramid, model, weights, packed,
                                   stats.seconds)

    if config.workers > 1 and len(alive) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, alive))
    else:
        results = [run(w) for w in alive]

    accepted = []
    reached_counts = [0] * (n_stages + 1)
    for window, (cum, reached, ok) in zip(alive, results):
        if ok:
            accepted.append((window, cum))
        else:
            reached_counts[reached] += 1
    # windows entering stage i = survivors minus everything rejected earlier
    entered = len(alive)
    for si in range(1, n_stages):
        stats.entering[si] = entered
        rejected_here = reached_counts[si + 1]
        stats.rejected[si] += rejected_here
        entered -= rejected_here
    return accepted


def detect(image, model, weights, config=None):
    """Full pipeline: pyramid, stage-1 scan, optional early pruning, lazy
    deeper stages, final NMS. Returns (detections, StageStats)."""
    config = config or DetectorConfig()
    if config.theta_enabled():
        if not 0.0 < config.theta <= 1.0:
            raise ConfigError(f"theta must be in (0, 1], got {config.theta}")
        if config.theta <= config.final_nms:
            raise ConfigError("theta must exceed the final NMS threshold "
                              "(pruning must be more permissive than merging)")
    if model.n_stages > 1:
        if weights is None:
            raise ConfigError("model has conv stages but no weights given")
        if model.backbone_hash and weights.content_hash() != model.backbone_hash:
            raise ConfigError("weights file does not match the model's "
                              "backbone hash")

    stats = StageStats.empty(model.n_stages)
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    pyramid = pyramid_for(image, model, config)
    stats.pyramid_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    windows, entering, rejected = scan_stage1(pyramid, model, config)
    stats.seconds[0] = time.perf_counter() - t0
    stats.entering[0] = entering
    stats.rejected[0] = rejected

    if config.theta_enabled():
        t0 = time.perf_counter()
        kept = early_nms(windows, config.theta)
        stats.nms_seconds += time.perf_counter() - t0
        stats.pruned_after[0] = len(windows) - len(kept)
        windows = kept

    if model.n_stages > 1:
        accepted = run_remaining_stages(pyramid, windows, model, weights,
                                        config, stats)
    else:
        accepted = [(w, w.score) for w in windows]

    _, ih, iw = image.shape
    detections = []
    for window, cum in accepted:
        if config.score_floor is not None and cum < config.score_floor:
            continue
        x, y, w, h = window.bbox
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(float(iw), x + w), min(float(ih), y + h)
        if x1 <= x0 or y1 <= y0:
            continue
        detections.append(Detection((x0, y0, x1 - x0, y1 - y0), cum,
                                    model.n_stages, window.scale))

    t0 = time.perf_counter()
    detections = final_nms(detections, config.final_nms)
    stats.nms_seconds += time.perf_counter() - t0
    stats.final_detections = len(detections)
    stats.total_seconds = time.perf_counter() - t_total
    return detections, stats
