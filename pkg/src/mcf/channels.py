"""First-layer handcrafted image channels: LUV color + gradient channels,
ACF-style shrinking, and the detection pyramid.

The 10-channel stack is ordered [L, U, V, normalized gradient magnitude,
6 orientation bins]. All channel math is plain numpy and shared by both
backends; only integral tables go through the kernel backend.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import ConfigError
from .image import resize_bilinear, validate_image

MODEL_WIN_H = 128
MODEL_WIN_W = 64

# sRGB (D65) -> XYZ, IEC 61966-2-1
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XN, _YN, _ZN = 0.95047, 1.0, 1.08883
_UN = 4.0 * _XN / (_XN + 15.0 * _YN + 3.0 * _ZN)
_VN = 9.0 * _YN / (_XN + 15.0 * _YN + 3.0 * _ZN)
_LUV_EPS = 216.0 / 24389.0
_LUV_KAPPA = 24389.0 / 27.0

# affine rescale of (L*, u*, v*) to [0,1]: textbook value ranges
_L_SCALE = 100.0
_U_OFF, _U_SCALE = 134.0, 354.0
_V_OFF, _V_SCALE = 140.0, 262.0

GRAD_NORM_CONST = 0.005  # magnitude / (smoothed magnitude + const)
GRAD_NORM_RADIUS = 5     # triangle smoothing radius for the normalizer
N_ORIENT_BINS = 6
POST_SHRINK_RADIUS = 1   # triangle smoothing after block averaging


@dataclass
class ChannelStack:
    """One layer of image channels: (channels, height, width) float32."""

    layer_index: int
    data: np.ndarray
    _tables: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def channel_count(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def tables(self):
        """Per-channel summed-area tables, built once and cached."""
        if self._tables is None:
            self._tables = kernels.integral_images(
                np.ascontiguousarray(self.data, dtype=np.float32))
        return self._tables


@dataclass
class PyramidSpec:
    scales_per_octave: int = 8
    min_window: tuple = (MODEL_WIN_H, MODEL_WIN_W)
    shrink: int = 4

    def __post_init__(self):
        if self.scales_per_octave < 1:
            raise ConfigError("scales_per_octave must be >= 1")
        if self.shrink not in (1, 2, 4):
            raise ConfigError(f"shrink must be 1, 2 or 4, got {self.shrink}")


@dataclass
class PyramidLevel:
    scale: float
    image: np.ndarray          # resampled (3, H, W) float32
    channels: ChannelStack     # L1 stack of the resampled image


def triangle_filter(planes, radius):
    """Separable triangle filter [1..r+1..1]/(r+1)^2 with replicated borders.

    Accepts (H, W) or (C, H, W); computes in float64.
    """
    k = np.concatenate([np.arange(1, radius + 1), [radius + 1],
                        np.arange(radius, 0, -1)]).astype(np.float64)
    k /= (radius + 1) ** 2
    squeeze = planes.ndim == 2
    p = np.asarray(planes, dtype=np.float64)
    if squeeze:
        p = p[None]
    pad = np.pad(p, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    h_out = np.zeros_like(p)
    w = p.shape[2]
    for i in range(k.size):
        h_out += k[i] * pad[:, :, i:i + w]
    pad = np.pad(h_out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(p)
    h = p.shape[1]
    for i in range(k.size):
        out += k[i] * pad[:, i:i + h, :]
    return out[0] if squeeze else out


def block_average(planes, shrink):
    """Mean over shrink x shrink blocks; dims must be divisible by shrink."""
    if shrink == 1:
        return np.asarray(planes, dtype=np.float64)
    p = np.asarray(planes, dtype=np.float64)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[None]
    c, h, w = p.shape
    if h % shrink or w % shrink:
        raise ConfigError(f"dims {h}x{w} not divisible by shrink {shrink}")
    out = p.reshape(c, h // shrink, shrink, w // shrink, shrink).mean(axis=(2, 4))
    return out[0] if squeeze else out


def _srgb_linearize(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_luv(image):
    """LUV color channels rescaled to [0,1]; D65 white point.

    Returns a 3-channel stack: L*/100, (u*+134)/354, (v*+140)/262, clipped.
    """
    img = validate_image(image).astype(np.float64)
    lin = _srgb_linearize(img)
    x = (_SRGB_TO_XYZ[0, 0] * lin[0] + _SRGB_TO_XYZ[0, 1] * lin[1]
         + _SRGB_TO_XYZ[0, 2] * lin[2])
    y = (_SRGB_TO_XYZ[1, 0] * lin[0] + _SRGB_TO_XYZ[1, 1] * lin[1]
         + _SRGB_TO_XYZ[1, 2] * lin[2])
    z = (_SRGB_TO_XYZ[2, 0] * lin[0] + _SRGB_TO_XYZ[2, 1] * lin[1]
         + _SRGB_TO_XYZ[2, 2] * lin[2])
    yr = y / _YN
    lstar = np.where(yr > _LUV_EPS, 116.0 * np.cbrt(yr) - 16.0, _LUV_KAPPA * yr)
    denom = x + 15.0 * y + 3.0 * z
    safe = denom > 0
    up = np.where(safe, 4.0 * x / np.where(safe, denom, 1.0), _UN)
    vp = np.where(safe, 9.0 * y / np.where(safe, denom, 1.0), _VN)
    ustar = 13.0 * lstar * (up - _UN)
    vstar = 13.0 * lstar * (vp - _VN)
    out = np.stack([
        lstar / _L_SCALE,
        (ustar + _U_OFF) / _U_SCALE,
        (vstar + _V_OFF) / _V_SCALE,
    ])
    return ChannelStack(1, np.clip(out, 0.0, 1.0).astype(np.float32))


def _centered_diff(p, axis):
    # kernel [-1, 0, 1] with replicated borders
    g = np.empty_like(p)
    if p.shape[axis] == 1:
        g[:] = 0.0
        return g
    if axis == 2:
        g[:, :, 1:-1] = p[:, :, 2:] - p[:, :, :-2]
        g[:, :, 0] = p[:, :, 1] - p[:, :, 0]
        g[:, :, -1] = p[:, :, -1] - p[:, :, -2]
    else:
        g[:, 1:-1, :] = p[:, 2:, :] - p[:, :-2, :]
        g[:, 0, :] = p[:, 1, :] - p[:, 0, :]
        g[:, -1, :] = p[:, -1, :] - p[:, -2, :]
    return g


def gradient_channels(image):
    """Normalized gradient magnitude plus 6 orientation-binned channels.

    Per pixel the color plane with the largest gradient magnitude wins;
    orientation is unsigned in [0, pi), bin centers at k*pi/6, magnitude
    linearly interpolated between the two adjacent bins. The binned value is
    the normalized magnitude, so the 6 orientation channels sum to channel 0.
    """
    img = validate_image(image).astype(np.float64)
    gx = _centered_diff(img, 2)
    gy = _centered_diff(img, 1)
    mag2 = gx * gx + gy * gy
    best = np.argmax(mag2, axis=0)
    sel = best[None]
    gxb = np.take_along_axis(gx, sel, axis=0)[0]
    gyb = np.take_along_axis(gy, sel, axis=0)[0]
    mag = np.sqrt(np.take_along_axis(mag2, sel, axis=0)[0])
    norm = mag / (triangle_filter(mag, GRAD_NORM_RADIUS) + GRAD_NORM_CONST)

    theta = np.arctan2(gyb, gxb)
    theta = np.where(theta < 0.0, theta + np.pi, theta)
    theta = np.where(theta >= np.pi, theta - np.pi, theta)
    u = theta * (N_ORIENT_BINS / np.pi)
    b0 = np.minimum(np.floor(u).astype(np.int64), N_ORIENT_BINS - 1)
    frac = np.clip(u - b0, 0.0, 1.0)
    b1 = (b0 + 1) % N_ORIENT_BINS

    h, w = mag.shape
    out = np.zeros((1 + N_ORIENT_BINS, h, w), dtype=np.float64)
    out[0] = norm
    w_lo = norm * (1.0 - frac)
    w_hi = norm * frac
    for b in range(N_ORIENT_BINS):
        out[1 + b] = np.where(b0 == b, w_lo, 0.0) + np.where(b1 == b, w_hi, 0.0)
    return ChannelStack(1, out.astype(np.float32))


def _pad_to_multiple(img, shrink):
    # replicate bottom/right rows so dims divide the shrink factor
    _, h, w = img.shape
    ph = (-h) % shrink
    pw = (-w) % shrink
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


def compute_l1(image, shrink=4):
    """Full 10-channel first layer: LUV + gradient channels, block-averaged
    by ``shrink`` and smoothed with a radius-1 triangle filter."""
    if shrink not in (1, 2, 4):
        raise ConfigError(f"shrink must be 1, 2 or 4, got {shrink}")
    img = _pad_to_multiple(validate_image(image), shrink)
    luv = rgb_to_luv(img).data.astype(np.float64)
    grad = gradient_channels(img).data.astype(np.float64)
    full = np.concatenate([luv, grad], axis=0)
    shrunk = block_average(full, shrink)
    smooth = triangle_filter(shrunk, POST_SHRINK_RADIUS)
    return ChannelStack(1, np.ascontiguousarray(smooth, dtype=np.float32))


def pyramid_scales(h, w, spec):
    """Scale factors 2^(-k/spo) down to where the image meets the window."""
    win_h, win_w = spec.min_window
    scales = []
    k = 0
    while True:
        s = 2.0 ** (-k / spec.scales_per_octave)
        if int(round(h * s)) < win_h or int(round(w * s)) < win_w:
            break
        scales.append(s)
        k += 1
    return scales


def build_pyramid(image, spec, workers=1):
    """Per-scale L1 channel stacks; empty list if the image is too small.

    Levels are computed exactly at each scale (no octave interpolation) and
    returned in decreasing-scale order regardless of worker count.
    """
    img = validate_image(image)
    _, h, w = img.shape
    scales = pyramid_scales(h, w, spec)

    def level(s):
        hs, ws = int(round(h * s)), int(round(w * s))
        scaled = img if s == 1.0 else resize_bilinear(img, hs, ws)
        return PyramidLevel(s, scaled, compute_l1(scaled, spec.shrink))

    if workers > 1 and len(scales) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(level, scales))
    return [level(s) for s in scales]
