"""Image loading (PPM P6 and PNG), validation, resampling, channel dumps.

Images are (3, H, W) float32 arrays with values in [0, 1], planes in RGB
order. 8-bit files are decoded by dividing by 255.
"""

import struct

import numpy as np

from .errors import DataError, InvalidInputError

CHANNEL_DUMP_MAGIC = b"MCFC"
CHANNEL_DUMP_VERSION = 1


def validate_image(img):
    """Check the (3, H, W) [0,1] float contract; returns the array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidInputError(f"expected (3, H, W) image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise InvalidInputError("image must be at least 1x1")
    if not np.isfinite(img).all():
        raise InvalidInputError("image contains non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidInputError("image values outside [0, 1]")
    return np.ascontiguousarray(img, dtype=np.float32)


def _read_ppm_token(f):
    # skip whitespace and '#' comments between header tokens
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def load_ppm(path):
    """Decode a binary (P6) 8-bit PPM into a (3, H, W) float32 image."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM (P6) file")
        w = int(_read_ppm_token(f))
        h = int(_read_ppm_token(f))
        maxval = int(_read_ppm_token(f))
        if maxval != 255:
            raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_ppm(path, img):
    """Write a (3, H, W) [0,1] float image as binary 8-bit PPM."""
    img = np.asarray(img)
    _, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.transpose(1, 2, 0).tobytes())


def load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def load_image(path):
    """Load a PPM or PNG file by extension (PPM by default)."""
    p = str(path)
    if p.lower().endswith(".png"):
        return load_png(p)
    return load_ppm(p)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample of (C, H, W) planes; pixel centers aligned.

    Source coordinate of output pixel i is (i + 0.5) * scale - 0.5, clamped.
    Computed in float64, returned as float32.
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return (top + (bot - top) * fy).astype(np.float32)


def resample_box(img, box, out_h, out_w):
    """Bilinear crop of a (x, y, w, h) box to out_h x out_w.

    Sample points are spread over the box interior; coordinates outside the
    image are clamped (border replication).
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    bx, by, bw, bh = box
    ys = by + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = bx + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = np.clip(ys - y0f, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0f, 0.0, 1.0)[None, None, :]
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return (top + (bot - top) * fy).astype(np.float32)


def dump_channels(path, planes):
    """Debug dump: 'MCFC' + u32 version + u32 w, h, channels + f32 LE planes."""
    planes = np.ascontiguousarray(planes, dtype=np.float32)
    c, h, w = planes.shape
    with open(path, "wb") as f:
        f.write(CHANNEL_DUMP_MAGIC)
        f.write(struct.pack("<IIII", CHANNEL_DUMP_VERSION, w, h, c))
        f.write(planes.astype("<f4").tobytes())


def load_channels(path):
    """Read back an MCFC channel dump as (C, H, W) float32."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHANNEL_DUMP_MAGIC:
            raise DataError(f"{path}: bad channel dump magic {magic!r}")
        version, w, h, c = struct.unpack("<IIII", f.read(16))
        if version != CHANNEL_DUMP_VERSION:
            raise DataError(f"{path}: unsupported channel dump version {version}")
        raw = f.read(4 * w * h * c)
    if len(raw) != 4 * w * h * c:
        raise DataError(f"{path}: truncated channel dump")
    return np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
