"""Multi-stage boosted soft cascade: stage planning, depth-limited decision
trees as weak learners, discrete AdaBoost with carried scores across stages,
per-tree reject thresholds, and hard-negative bootstrap training.

The strong classifier is the sum of every stage's scaled tree outputs; stage
i draws its features only from layer i. Reject thresholds are calibrated
from the positive samples' cumulative score traces after every tree.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .channels import MODEL_WIN_H, MODEL_WIN_W, ChannelStack, PyramidSpec, compute_l1
from .convnet import forward_layer
from .errors import ConfigError, DataError, ModelFormatError
from .features import (FeatureSpec, L1PoolConfig, StageData, enumerate_pool_conv,
                       enumerate_pool_l1, evaluate)
from .image import resample_box

log = logging.getLogger(__name__)

EPS_CLAMP = 1e-6
MODEL_FORMAT_VERSION = 1


@dataclass
class StagePlan:
    """Weak-learner budget per stage: half to stage 1, the rest split evenly
    (floored; the remainder is dropped)."""

    n_all: int
    n_stages: int
    k: list

    def __post_init__(self):
        if self.k[0] != self.n_all // 2:
            raise ConfigError("stage 1 must hold half the budget")
        if len(self.k) != self.n_stages:
            raise ConfigError("one budget entry per stage")
        if self.n_stages > 1:
            ki = self.n_all // (2 * (self.n_stages - 1))
            if any(v != ki for v in self.k[1:]):
                raise ConfigError("later stages must split the remainder evenly")
        if min(self.k) < 1:
            raise ConfigError("every stage needs at least one tree")


def plan_stages(n_all, n_stages):
    if n_stages < 2:
        raise ConfigError("a cascade needs at least 2 stages")
    if n_all < 2 * (n_stages - 1):
        raise ConfigError(
            f"budget {n_all} too small for one tree in each of {n_stages} stages")
    k1 = n_all // 2
    ki = n_all // (2 * (n_stages - 1))
    return StagePlan(n_all, n_stages, [k1] + [ki] * (n_stages - 1))


@dataclass
class DecisionTree:
    """Complete binary tree of fixed depth; a node with feature None passes
    left and its subtree leaves share one value (early leaf)."""

    depth: int
    features: list            # length 2**depth - 1, FeatureSpec or None
    thresholds: np.ndarray    # float64
    polarities: np.ndarray    # int8, +1: left iff v < thr, -1: left iff v >= thr
    leaves: np.ndarray        # float64, length 2**depth
    error: float = 0.0        # weighted training error of the unscaled tree

    @property
    def n_internal(self):
        return (1 << self.depth) - 1


@dataclass
class Stage:
    layer_index: int          # 1-based MCF layer this stage reads
    source: str               # "l1" or "conv:<block>"
    trees: list
    reject_thresholds: np.ndarray


@dataclass
class CascadeModel:
    plan: StagePlan
    stages: list
    depth: int
    shrink: int
    l1_geometry: tuple        # (channels, h, w) of the shrunk first layer
    backbone_hash: str = None
    conv_blocks: list = field(default_factory=list)   # per stage >= 2
    metadata: dict = field(default_factory=dict)
    _packed: list = field(default=None, repr=False, compare=False)

    @property
    def n_stages(self):
        return len(self.stages)

    def packed(self):
        if self._packed is None:
            self._packed = [_pack_stage(s, self.depth) for s in self.stages]
        return self._packed


@dataclass
class TrainConfig:
    n_all: int = 4096
    n_stages: int = 6
    tree_depth: int = 4
    bootstrap_rounds: tuple = (32, 128, 512, 2048, 4096)
    negatives_per_round: int = 5000
    initial_negatives: int = 5000
    calibration: str = "min-positive"   # or "quantile"
    quantile_q: float = 0.05
    margin: float = 1e-6
    seed: int = 0
    l1_high_features: int = 30000
    l1_pool_seed: int = 0
    shrink: int = 4
    scales_per_octave: int = 8
    stride: int = 4
    mining_iou_max: float = 0.3
    conv_blocks: tuple = None           # default: deepest n_stages-1 exports
    pos_augment: int = 4                # crops per annotation (first is exact)
    pos_jitter: float = 0.08            # relative scale/offset jitter; odd
                                        # augment indices are mirrored

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.bootstrap_rounds[1:],
                                      self.bootstrap_rounds)):
            raise ConfigError("bootstrap round tree counts must strictly increase")
        if self.calibration not in ("min-positive", "quantile"):
            raise ConfigError(f"unknown calibration mode {self.calibration!r}")
        if self.stride % self.shrink:
            raise ConfigError("stride must be a multiple of shrink")


def desk_config(**overrides):
    """Scaled-down preset for desk-scale experiments and tests."""
    base = dict(n_all=256, n_stages=2, tree_depth=2,
                bootstrap_rounds=(8, 32, 64), negatives_per_round=800,
                initial_negatives=1000, l1_high_features=2000,
                scales_per_octave=4)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# weak learner


def _majority(labels, weights, ids):
    wp = weights[ids][labels[ids] > 0].sum()
    wn = weights[ids][labels[ids] < 0].sum()
    return 1.0 if wp > wn else -1.0


def _subtree_leaf_range(node, level, depth):
    # leaves under `node` (level-order index) are contiguous
    first = ((node + 1) << (depth - level)) - 1
    count = 1 << (depth - level)
    n_internal = (1 << depth) - 1
    return first - n_internal, count


def train_tree(data, idx, labels, weights, depth):
    """Greedy top-down tree fit minimizing weighted error on a quantized
    threshold grid; ties break to the lowest pool index, then the lowest
    threshold. Leaves predict the weighted-majority class (+-1).

    Returns (tree, weighted_error) with the error measured over all ``idx``
    samples with the given weights.
    """
    n_internal = (1 << depth) - 1
    features = [None] * n_internal
    feat_idx = np.full(n_internal, -1, dtype=np.int64)
    thresholds = np.zeros(n_internal, dtype=np.float64)
    polarities = np.ones(n_internal, dtype=np.int8)
    leaves = np.zeros(1 << depth, dtype=np.float64)

    def fill(node, ids, level):
        value = _majority(labels, weights, ids) if len(ids) else -1.0
        lo, count = _subtree_leaf_range(node, level, depth)
        leaves[lo:lo + count] = value

    def build(node, ids, level):
        if level == depth:
            leaves[node - n_internal] = (
                _majority(labels, weights, ids) if len(ids) else -1.0)
            return
        pure = len(ids) == 0 or (labels[ids] == labels[ids[0]]).all()
        split = None if pure else data.best_split(ids, labels, weights)
        if split is None:
            fill(node, ids, level)
            return
        f, thr, _ = split
        col = data.column(f, ids)
        left = col < thr
        if left.all() or not left.any():
            fill(node, ids, level)
            return
        features[node] = data.pool.specs[f]
        feat_idx[node] = f
        thresholds[node] = thr
        build(2 * node + 1, ids[left], level + 1)
        build(2 * node + 2, ids[~left], level + 1)

    idx = np.asarray(idx, dtype=np.int64)
    build(0, idx, 0)
    tree = DecisionTree(depth, features, thresholds, polarities, leaves)
    tree._feat_idx = feat_idx
    pred = apply_tree(tree, data, idx)
    err = float(weights[idx][np.sign(pred) != labels[idx]].sum())
    tree.error = err
    return tree, err


def apply_tree(tree, data, idx):
    """Leaf values of ``tree`` for samples ``idx`` (vectorized descent)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.empty(idx.size, dtype=np.float64)
    n_internal = tree.n_internal
    feat_idx = tree._feat_idx

    def walk(node, pos, level):
        if not pos.size:
            return
        if level == tree.depth:
            out[pos] = tree.leaves[node - n_internal]
            return
        f = feat_idx[node]
        if f < 0:
            walk(2 * node + 1, pos, level + 1)
            return
        col = data.column(f, idx[pos])
        if tree.polarities[node] > 0:
            left = col < tree.thresholds[node]
        else:
            left = col >= tree.thresholds[node]
        walk(2 * node + 1, pos[left], level + 1)
        walk(2 * node + 2, pos[~left], level + 1)

    walk(0, np.arange(idx.size, dtype=np.int64), 0)
    return out


def calibrate_soft_cascade(pos_traces, mode="min-positive", q=0.05, margin=1e-6):
    """Per-tree reject thresholds from positive cumulative-score traces.

    min-positive: min over retained positives minus margin (no training
    positive is ever rejected). quantile: the q-quantile (sorted ascending,
    index floor(q*(n-1))) minus margin.
    """
    traces = np.asarray(pos_traces, dtype=np.float64)
    if traces.ndim != 2 or traces.shape[0] < 1:
        raise ConfigError("calibration needs at least one positive trace")
    if mode == "min-positive":
        return traces.min(axis=0) - margin
    if mode == "quantile":
        srt = np.sort(traces, axis=0)
        i = int(np.floor(q * (traces.shape[0] - 1)))
        return srt[i] - margin
    raise ConfigError(f"unknown calibration mode {mode!r}")


def boost_stage(data, labels, k, depth, carried, calibration="min-positive",
                quantile_q=0.05, margin=1e-6):
    """Discrete AdaBoost for one stage, continuing from carried scores.

    Weights start at exp(-y * H) and are renormalized every round; each
    tree's +-1 leaves are scaled by 0.5 * ln((1-e)/e) with e clamped away
    from 0 and 1. Returns (trees, reject_thresholds, new_carried, eps,
    losses) where losses track the exponential loss after every round.
    """
    labels = np.asarray(labels, dtype=np.int8)
    n = labels.size
    if not (labels > 0).any() or not (labels < 0).any():
        raise ConfigError("boosting needs at least one sample of each class")
    h_cum = np.asarray(carried, dtype=np.float64).copy()
    idx_all = np.arange(n, dtype=np.int64)
    pos = labels > 0
    trees = []
    eps_list = []
    losses = []
    pos_traces = np.empty((int(pos.sum()), k), dtype=np.float64)
    for t in range(k):
        w = np.exp(-labels * h_cum)
        w /= w.sum()
        tree, eps = train_tree(data, idx_all, labels, w, depth)
        eps_c = min(max(eps, EPS_CLAMP), 1.0 - EPS_CLAMP)
        alpha = 0.5 * np.log((1.0 - eps_c) / eps_c)
        tree.leaves = tree.leaves * alpha
        h_cum = h_cum + apply_tree(tree, data, idx_all)
        trees.append(tree)
        eps_list.append(eps)
        losses.append(float(np.exp(-labels * h_cum).sum()))
        pos_traces[:, t] = h_cum[pos]
    reject = calibrate_soft_cascade(pos_traces, calibration, quantile_q, margin)
    return trees, reject, h_cum, eps_list, losses


# ---------------------------------------------------------------------------
# scoring


def _eval_node(spec, thr, pol, mlc):
    v = evaluate(spec, mlc)
    return (v < thr) if pol > 0 else (v >= thr)


def score(model, channels, early_exit=True):
    """Cumulative cascade score of one window.

    Returns (score, stage_reached, accepted); with early_exit the walk stops
    at the first tree whose cumulative score drops below its reject
    threshold. Layers must be populated up to the deepest stage evaluated.
    """
    cum = 0.0
    for si, stage in enumerate(model.stages):
        for ti, tree in enumerate(stage.trees):
            node = 0
            for _ in range(tree.depth):
                spec = tree.features[node]
                left = True if spec is None else _eval_node(
                    spec, tree.thresholds[node], tree.polarities[node], channels)
                node = 2 * node + 1 + (0 if left else 1)
            cum += tree.leaves[node - tree.n_internal]
            if early_exit and cum < stage.reject_thresholds[ti]:
                return cum, si + 1, False
    return cum, len(model.stages), True


# ---------------------------------------------------------------------------
# packing for the scan kernels

_KIND_CODE = {"zero": 0, "one": 1, "high": 2}


@dataclass
class PackedStage:
    kind: np.ndarray
    chan: np.ndarray
    chan_b: np.ndarray
    rect: np.ndarray
    rect_b: np.ndarray
    thr: np.ndarray
    pol: np.ndarray
    leaf: np.ndarray
    reject: np.ndarray
    has_rect: bool


def _pack_stage(stage, depth):
    n_trees = len(stage.trees)
    n_internal = (1 << depth) - 1
    n_leaves = 1 << depth
    kind = np.full((n_trees, n_internal), -1, dtype=np.int8)
    chan = np.zeros((n_trees, n_internal), dtype=np.int32)
    chan_b = np.zeros((n_trees, n_internal), dtype=np.int32)
    rect = np.zeros((n_trees, n_internal, 4), dtype=np.int32)
    rect_b = np.zeros((n_trees, n_internal, 4), dtype=np.int32)
    thr = np.zeros((n_trees, n_internal), dtype=np.float64)
    pol = np.ones((n_trees, n_internal), dtype=np.int8)
    leaf = np.zeros((n_trees, n_leaves), dtype=np.float64)
    for t, tree in enumerate(stage.trees):
        for ni, spec in enumerate(tree.features):
            if spec is None:
                continue
            kind[t, ni] = _KIND_CODE[spec.kind]
            chan[t, ni] = spec.channel
            chan_b[t, ni] = spec.channel if spec.channel_b is None else spec.channel_b
            rect[t, ni] = spec.rect_a
            if spec.rect_b is not None:
                rect_b[t, ni] = spec.rect_b
        thr[t] = tree.thresholds
        pol[t] = tree.polarities
        leaf[t] = tree.leaves
    return PackedStage(kind, chan, chan_b, rect, rect_b, thr, pol, leaf,
                       np.asarray(stage.reject_thresholds, dtype=np.float64),
                       bool((kind > 0).any()))


# ---------------------------------------------------------------------------
# training


def _l1_stack(crop, shrink):
    return compute_l1(crop, shrink).data


def _stack_l1(crops, shrink):
    return np.stack([_l1_stack(c, shrink) for c in crops])


def _boxes_iou(box, others):
    if not others:
        return 0.0
    x, y, w, h = box
    best = 0.0
    for ox, oy, ow, oh in others:
        ix = max(0.0, min(x + w, ox + ow) - max(x, ox))
        iy = max(0.0, min(y + h, oy + oh) - max(y, oy))
        inter = ix * iy
        union = w * h + ow * oh - inter
        if union > 0 and inter / union > best:
            best = inter / union
    return best


def _sample_initial_negatives(images, gt, config, count):
    """Seeded random 2:1 windows that barely overlap any annotation."""
    rng = np.random.default_rng(config.seed)
    crops = []
    attempts = 0
    limit = 50 * count
    while len(crops) < count and attempts < limit:
        attempts += 1
        path, img = images[int(rng.integers(0, len(images)))]
        _, ih, iw = img.shape
        max_h = min(ih, 3 * MODEL_WIN_H)
        if max_h < MODEL_WIN_H or iw < MODEL_WIN_W:
            continue
        bh = int(rng.integers(MODEL_WIN_H, max_h + 1))
        bw = bh // 2
        if bw > iw:
            continue
        x = int(rng.integers(0, iw - bw + 1))
        y = int(rng.integers(0, ih - bh + 1))
        boxes = [(g.x, g.y, g.w, g.h) for g in gt.get(path, [])]
        if _boxes_iou((x, y, bw, bh), boxes) >= config.mining_iou_max:
            continue
        crops.append(resample_box(img, (x, y, bw, bh), MODEL_WIN_H, MODEL_WIN_W))
    return crops


def _single_stage_model(trees, reject, config, l1_geom):
    plan = StagePlan(2 * len(trees), 1, [len(trees)])
    return CascadeModel(plan, [Stage(1, "l1", trees, reject)],
                        config.tree_depth, config.shrink, l1_geom)


def _mine_hard_negatives(images, gt, model, config, cap):
    """Scan training images with the current model and keep its top-scoring
    surviving non-annotation windows as new negatives.

    Survivors of the calibrated soft cascade (not just positively scored
    windows) are what the deeper stages will face at test time, so that is
    what gets mined."""
    from . import detector  # deferred: detector imports this module

    dcfg = detector.DetectorConfig(stride=config.stride,
                                   scales_per_octave=config.scales_per_octave)
    per_image = max(1, int(np.ceil(2.0 * cap / max(1, len(images)))))
    mined = []
    for path, img in images:
        pyramid = detector.pyramid_for(img, model, dcfg)
        wins, _, _ = detector.scan_stage1(pyramid, model, dcfg)
        boxes = [(g.x, g.y, g.w, g.h) for g in gt.get(path, [])]
        cands = [w for w in wins
                 if _boxes_iou(w.bbox, boxes) < config.mining_iou_max]
        cands.sort(key=lambda w: (-w.score, w.bbox[0], w.bbox[1], w.scale))
        for w in cands[:per_image]:
            mined.append((w.score, path, detector.crop_window(
                pyramid[w.level], w.cell_y, w.cell_x, model.shrink)))
    mined.sort(key=lambda t: (-t[0], t[1]))
    return [c for _, _, c in mined[:cap]]


def train_multistage(dataset, backbone_weights, config):
    """Full training: bootstrap rounds on the first layer with growing tree
    budgets mining hard negatives each round, then the staged cascade with
    carried scores and per-stage threshold calibration."""
    images = dataset.images
    gt = dataset.gt
    l1_h, l1_w = MODEL_WIN_H // config.shrink, MODEL_WIN_W // config.shrink
    l1_geom = (10, l1_h, l1_w)

    jit_rng = np.random.default_rng(config.seed + 101)
    pos_crops = []
    for path, img in images:
        for g in gt.get(path, []):
            if g.ignore:
                continue
            for a in range(max(1, config.pos_augment)):
                if a == 0:
                    box = (g.x, g.y, g.w, g.h)
                else:
                    j = config.pos_jitter
                    s = 1.0 + jit_rng.uniform(-j, j)
                    dx = jit_rng.uniform(-j, j) * g.w
                    dy = jit_rng.uniform(-j, j) * g.h
                    box = (g.x + dx + g.w * (1 - s) / 2,
                           g.y + dy + g.h * (1 - s) / 2, g.w * s, g.h * s)
                crop = resample_box(img, box, MODEL_WIN_H, MODEL_WIN_W)
                if a % 2 == 1:
                    crop = np.ascontiguousarray(crop[:, :, ::-1])
                pos_crops.append(crop)
    if not pos_crops:
        raise DataError("no positive annotations in the training set")

    neg_crops = _sample_initial_negatives(images, gt, config,
                                          config.initial_negatives)
    log.info("training: %d positives, %d initial negatives",
             len(pos_crops), len(neg_crops))

    pool_l1 = enumerate_pool_l1(
        l1_geom, L1PoolConfig(n_high=config.l1_high_features,
                              seed=config.l1_pool_seed))
    pos_l1 = _stack_l1(pos_crops, config.shrink)
    neg_l1 = _stack_l1(neg_crops, config.shrink) if neg_crops else \
        np.zeros((0,) + l1_geom, dtype=np.float32)

    mined_counts = []
    for round_idx, n_trees in enumerate(config.bootstrap_rounds):
        if not neg_crops:
            raise DataError(
                f"insufficient negatives before bootstrap round {round_idx + 1} "
                f"(have 0)")
        stacks = np.concatenate([pos_l1, neg_l1])
        labels = np.concatenate([np.ones(len(pos_crops), dtype=np.int8),
                                 -np.ones(len(neg_crops), dtype=np.int8)])
        data = StageData(pool_l1, stacks)
        trees, reject, _, _, _ = boost_stage(
            data, labels, n_trees, config.tree_depth,
            np.zeros(labels.size), config.calibration, config.quantile_q,
            config.margin)
        model = _single_stage_model(trees, reject, config, l1_geom)
        mined = _mine_hard_negatives(images, gt, model, config,
                                     config.negatives_per_round)
        mined_counts.append(len(mined))
        if mined:
            neg_crops.extend(mined)
            neg_l1 = np.concatenate([neg_l1, _stack_l1(mined, config.shrink)])
        log.info("bootstrap round %d (%d trees): mined %d hard negatives "
                 "(total %d)", round_idx + 1, n_trees, len(mined), len(neg_crops))

    plan = plan_stages(config.n_all, config.n_stages)
    exports = backbone_weights.spec.produces_layers
    if config.conv_blocks is not None:
        conv_blocks = list(config.conv_blocks)
    else:
        conv_blocks = exports[-(config.n_stages - 1):]
    if len(conv_blocks) != config.n_stages - 1:
        raise ConfigError(
            f"{len(conv_blocks)} conv layers bound to {config.n_stages - 1} stages")
    if any(b not in exports for b in conv_blocks):
        raise ConfigError("conv layer binding must use exported blocks")
    if any(b >= a for a, b in zip(conv_blocks[1:], conv_blocks)):
        raise ConfigError("conv layer binding must be strictly increasing")

    all_crops = pos_crops + neg_crops
    labels = np.concatenate([np.ones(len(pos_crops), dtype=np.int8),
                             -np.ones(len(neg_crops), dtype=np.int8)])
    stacks = np.concatenate([pos_l1, neg_l1])
    data = StageData(pool_l1, stacks)
    carried = np.zeros(labels.size)
    log.info("stage 1: %d trees over %d candidate features on %d samples",
             plan.k[0], len(pool_l1), labels.size)
    trees, reject, carried, eps1, loss1 = boost_stage(
        data, labels, plan.k[0], config.tree_depth, carried,
        config.calibration, config.quantile_q, config.margin)
    stages = [Stage(1, "l1", trees, reject)]
    stage_eps = [eps1]
    stage_losses = [loss1]
    del data, stacks

    cur = np.stack(all_crops)  # (n, 3, 128, 64) -> advanced block by block
    cur_block = 0
    for si, block in enumerate(conv_blocks):
        while cur_block < block:
            layer = backbone_weights.spec.layers[cur_block]
            k_w, b_w = backbone_weights.tensors[cur_block]
            cur = np.stack([forward_layer(cur[i], layer, k_w, b_w)
                            for i in range(cur.shape[0])])
            cur_block += 1
        geom = cur.shape[1:]
        pool = enumerate_pool_conv(geom, si + 2)
        data = StageData(pool, cur)
        log.info("stage %d (conv block %d, %dx%dx%d): %d trees",
                 si + 2, block, *geom, plan.k[si + 1])
        trees, reject, carried, eps_i, loss_i = boost_stage(
            data, labels, plan.k[si + 1], config.tree_depth, carried,
            config.calibration, config.quantile_q, config.margin)
        stages.append(Stage(si + 2, f"conv:{block}", trees, reject))
        stage_eps.append(eps_i)
        stage_losses.append(loss_i)
        del data

    meta = {
        "config": asdict(config),
        "n_positives": len(pos_crops),
        "n_negatives": len(neg_crops),
        "bootstrap_mined": mined_counts,
        "stage_errors": stage_eps,
        "stage_losses": stage_losses,
    }
    return CascadeModel(plan, stages, config.tree_depth, config.shrink,
                        l1_geom, backbone_weights.content_hash(),
                        conv_blocks, meta)


# ---------------------------------------------------------------------------
# model file round-trip (structured text; floats keep full precision)


def _spec_to_dict(spec):
    if spec is None:
        return None
    return {"kind": spec.kind, "layer": spec.layer, "channel": spec.channel,
            "channel_b": spec.channel_b,
            "rect": list(spec.rect_a),
            "rect_b": None if spec.rect_b is None else list(spec.rect_b)}


def _spec_from_dict(d):
    if d is None:
        return None
    return FeatureSpec(d["kind"], d["layer"], d["channel"], tuple(d["rect"]),
                       None if d["rect_b"] is None else tuple(d["rect_b"]),
                       d["channel_b"])


def model_to_dict(model):
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "plan": {"n_all": model.plan.n_all, "n_stages": model.plan.n_stages,
                 "k": list(model.plan.k)},
        "depth": model.depth,
        "shrink": model.shrink,
        "l1_geometry": list(model.l1_geometry),
        "backbone_hash": model.backbone_hash,
        "conv_blocks": list(model.conv_blocks),
        "metadata": model.metadata,
        "stages": [{
            "layer_index": s.layer_index,
            "source": s.source,
            "reject_thresholds": [float(v) for v in s.reject_thresholds],
            "trees": [{
                "features": [_spec_to_dict(f) for f in t.features],
                "thresholds": [float(v) for v in t.thresholds],
                "polarities": [int(v) for v in t.polarities],
                "leaves": [float(v) for v in t.leaves],
                "error": t.error,
            } for t in s.trees],
        } for s in model.stages],
    }


def save_model(path, model):
    with open(path, "w") as f:
        f.write(json.dumps(model_to_dict(model), sort_keys=True, indent=1))
        f.write("\n")


def load_model(path):
    with open(path) as f:
        try:
            d = json.load(f)
        except ValueError as e:
            raise ModelFormatError(f"{path}: not a valid model file: {e}") from e
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version")
    try:
        plan = StagePlan(d["plan"]["n_all"], d["plan"]["n_stages"],
                         list(d["plan"]["k"]))
        n_internal = (1 << d["depth"]) - 1
        stages = []
        for sd in d["stages"]:
            trees = []
            for td in sd["trees"]:
                if len(td["features"]) != n_internal or \
                        len(td["leaves"]) != n_internal + 1:
                    raise ModelFormatError(
                        f"{path}: tree arrays do not match depth {d['depth']}")
                tree = DecisionTree(
                    d["depth"],
                    [_spec_from_dict(f) for f in td["features"]],
                    np.asarray(td["thresholds"], dtype=np.float64),
                    np.asarray(td["polarities"], dtype=np.int8),
                    np.asarray(td["leaves"], dtype=np.float64),
                    td["error"])
                for spec in tree.features:
                    if spec is not None and spec.layer != sd["layer_index"]:
                        raise ModelFormatError(
                            f"{path}: stage {sd['layer_index']} tree uses a "
                            f"layer-{spec.layer} feature")
                trees.append(tree)
            stages.append(Stage(sd["layer_index"], sd["source"], trees,
                                np.asarray(sd["reject_thresholds"],
                                           dtype=np.float64)))
        model = CascadeModel(plan, stages, d["depth"], d["shrink"],
                             tuple(d["l1_geometry"]), d["backbone_hash"],
                             list(d["conv_blocks"]), d["metadata"])
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"{path}: malformed model file: {e}") from e
    if sum(len(s.trees) for s in model.stages) != sum(plan.k):
        raise ModelFormatError(f"{path}: tree counts do not match the plan")
    return model
