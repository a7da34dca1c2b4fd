"""Candidate features over multi-layer channels and their evaluation.

Three kinds: ``zero`` (a single pixel), ``one`` (a rectangle sum), ``high``
(difference of two rectangle sums, possibly across channels). The first
layer's pool is every shrunk pixel plus a seeded sample of two-rectangle
differences (mirror-symmetric pairs and equal-size distant pairs); conv
layers use zero-order features only, one per pixel per channel.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels_py
from ._backend import kernels
from .errors import ConfigError, InvalidInputError

N_SPLIT_BINS = 256


@dataclass(frozen=True)
class FeatureSpec:
    kind: str                 # "zero" | "one" | "high"
    layer: int
    channel: int
    rect_a: tuple             # (x, y, w, h) in layer-local pixels
    rect_b: tuple = None      # high only
    channel_b: int = None     # high only; defaults to channel

    def __post_init__(self):
        if self.kind not in ("zero", "one", "high"):
            raise InvalidInputError(f"unknown feature kind {self.kind!r}")
        if self.kind == "zero":
            if self.rect_a[2:] != (1, 1) or self.rect_b is not None:
                raise InvalidInputError("zero-order feature must be a 1x1 rect")
        if self.kind == "high":
            if self.rect_b is None:
                raise InvalidInputError("high-order feature needs two rects")
            cb = self.channel if self.channel_b is None else self.channel_b
            if cb == self.channel and self.rect_b == self.rect_a:
                raise InvalidInputError("high-order rects must differ")

    def validate_geometry(self, channels, height, width):
        for rect, chan in ((self.rect_a, self.channel),
                           (self.rect_b, self.channel_b if self.channel_b
                            is not None else self.channel)):
            if rect is None:
                continue
            x, y, w, h = rect
            if not (0 <= chan < channels):
                raise InvalidInputError(f"channel {chan} outside stack")
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
                raise InvalidInputError(f"rect {rect} outside {height}x{width}")


@dataclass
class FeaturePool:
    """Ordered candidate features for one layer; zero-order specs first."""

    layer_index: int
    specs: list
    n_zero: int
    zero_geometry: tuple                      # (channels, h, w)
    high_rects: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.specs)


def integral_image(plane):
    """Summed-area table with zero top row/left column; float64."""
    p = np.ascontiguousarray(np.asarray(plane)[None], dtype=np.float32)
    if not np.isfinite(p).all():
        raise InvalidInputError("plane contains non-finite values")
    return kernels.integral_images(p)[0]


def rect_sum(table, x, y, w, h):
    """O(1) rectangle sum from a summed-area table."""
    return table[y + h, x + w] - table[y, x + w] - table[y + h, x] + table[y, x]


def evaluate(spec, channels):
    """Evaluate one feature on a window's populated layers.

    Raises SequencingError when the layer has not been computed yet (a
    detector staging bug, not bad input).
    """
    bound = channels.layer(spec.layer)
    stack = bound.stack
    x, y, w, h = spec.rect_a
    ox, oy = bound.ox + x, bound.oy + y
    if spec.kind == "zero":
        return float(stack.data[spec.channel, oy, ox])
    tables = stack.tables()
    if spec.kind == "one":
        return float(rect_sum(tables[spec.channel], ox, oy, w, h))
    cb = spec.channel if spec.channel_b is None else spec.channel_b
    xb, yb, wb, hb = spec.rect_b
    sa = rect_sum(tables[spec.channel], ox, oy, w, h)
    sb = rect_sum(tables[cb], bound.ox + xb, bound.oy + yb, wb, hb)
    return float(sa - sb)


@dataclass
class L1PoolConfig:
    n_high: int = 30000
    seed: int = 0
    min_rect: int = 2
    max_rect_frac: float = 0.5
    min_dist_factor: float = 1.0   # center distance > factor * max(w, h)
    mirror_fraction: float = 0.5


def _pack_high(specs, n_zero):
    rects = np.zeros((len(specs) - n_zero, 10), dtype=np.int32)
    for i, s in enumerate(specs[n_zero:]):
        cb = s.channel if s.channel_b is None else s.channel_b
        rects[i] = (s.channel, *s.rect_a, cb, *s.rect_b)
    return rects


def enumerate_pool_l1(geometry, config=None):
    """ACF-style zero-order pixels plus sampled two-rect differences.

    geometry: (channels, height, width) of the shrunk first layer. The
    high-order sample is deterministic under config.seed: mirror-symmetric
    pairs (shape symmetry) and equal-size pairs with center distance above a
    threshold (appearance constancy), capped at config.n_high.
    """
    config = config or L1PoolConfig()
    if config.n_high < 1:
        raise ConfigError("high-order feature cap must be >= 1")
    c, h, w = geometry
    specs = [FeatureSpec("zero", 1, ch, (x, y, 1, 1))
             for ch in range(c) for y in range(h) for x in range(w)]
    n_zero = len(specs)

    rng = np.random.default_rng(config.seed)
    max_w = max(config.min_rect, int(w * config.max_rect_frac))
    max_h = max(config.min_rect, int(h * config.max_rect_frac))
    tries = 0
    limit = 200 * config.n_high
    n_high = 0
    while n_high < config.n_high and tries < limit:
        tries += 1
        ch = int(rng.integers(0, c))
        rw = int(rng.integers(config.min_rect, max_w + 1))
        rh = int(rng.integers(config.min_rect, max_h + 1))
        xa = int(rng.integers(0, w - rw + 1))
        ya = int(rng.integers(0, h - rh + 1))
        if rng.random() < config.mirror_fraction:
            # horizontally mirrored partner inside the window
            xb, yb = w - xa - rw, ya
            if (xb, yb) == (xa, ya):
                continue
        else:
            xb = int(rng.integers(0, w - rw + 1))
            yb = int(rng.integers(0, h - rh + 1))
            dx = abs((xb + rw / 2.0) - (xa + rw / 2.0))
            dy = abs((yb + rh / 2.0) - (ya + rh / 2.0))
            if max(dx, dy) <= config.min_dist_factor * max(rw, rh):
                continue
        specs.append(FeatureSpec("high", 1, ch, (xa, ya, rw, rh),
                                 (xb, yb, rw, rh), ch))
        n_high += 1
    pool = FeaturePool(1, specs, n_zero, geometry)
    pool.high_rects = _pack_high(specs, n_zero)
    return pool


def enumerate_pool_conv(geometry, layer):
    """Every pixel of every channel as a zero-order feature, in
    (channel, y, x) lexicographic order."""
    if layer < 2:
        raise ConfigError("conv pools are for layers >= 2")
    c, h, w = geometry
    specs = [FeatureSpec("zero", layer, ch, (x, y, 1, 1))
             for ch in range(c) for y in range(h) for x in range(w)]
    pool = FeaturePool(layer, specs, len(specs), geometry)
    pool.high_rects = np.zeros((0, 10), dtype=np.int32)
    return pool


class StageData:
    """Feature-value access for boosting over one layer of stacked samples.

    ``stacks`` is (n, C, H, W) float32; its flattened view doubles as the
    zero-order sample-by-feature matrix (pool order matches the memory
    layout). Integral tables are built per sample only when the pool has
    rectangle features.
    """

    def __init__(self, pool, stacks):
        self.pool = pool
        n = stacks.shape[0]
        self.stacks = np.ascontiguousarray(stacks, dtype=np.float32)
        self.data2d = self.stacks.reshape(n, -1)
        if self.data2d.shape[1] != pool.n_zero:
            raise ConfigError(
                f"stack geometry {stacks.shape[1:]} does not match pool "
                f"geometry {pool.zero_geometry}")
        self.tables = None
        if len(pool.high_rects):
            tabs = [kernels.integral_images(self.stacks[i]) for i in range(n)]
            self.tables = np.ascontiguousarray(np.stack(tabs))

    @property
    def n_samples(self):
        return self.stacks.shape[0]

    def best_split(self, idx, labels, weights, n_bins=N_SPLIT_BINS):
        """Lowest-weighted-error (feature, threshold) over the whole pool.

        Ties break to the lowest pool index then the lowest threshold.
        Returns (pool_index, threshold, error) or None if no feature varies.
        """
        err_z, fz, jz, lo_z, hi_z = kernels.best_split_zero(
            self.data2d, idx, labels, weights, n_bins)
        best = (err_z, fz, jz, lo_z, hi_z)
        if self.tables is not None:
            err_h, fh, jh, lo_h, hi_h = kernels.best_split_high(
                self.tables, self.pool.high_rects, idx, labels, weights, n_bins)
            if fh >= 0 and err_h < best[0]:
                best = (err_h, self.pool.n_zero + fh, jh, lo_h, hi_h)
        err, f, j, lo, hi = best
        if f < 0:
            return None
        thr = lo + (hi - lo) * (j / n_bins)
        return f, thr, err

    def column(self, pool_idx, idx):
        """Float64 values of one feature over samples ``idx``."""
        if pool_idx < self.pool.n_zero:
            return self.data2d[idx, pool_idx].astype(np.float64)
        r = self.pool.high_rects[pool_idx - self.pool.n_zero]
        vals = _kernels_py.high_feature_values(
            self.tables, r[0:1], r[1:2], r[2:3], r[3:4], r[4:5],
            r[5:6], r[6:7], r[7:8], r[8:9], r[9:10], np.asarray(idx))
        return vals[:, 0]
