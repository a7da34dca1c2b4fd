"""Forward-only convolutional feature layers computed per detection window.

A backbone is an ordered list of conv blocks (cross-correlation + bias,
optional relu, optional 2x2/2 max-pool) applied to the 128x64 RGB crop of a
window. Block outputs are cached per window so a deeper stage resumes where
the previous one stopped instead of recomputing the stack.

Weights file (MCFW): magic, u32 version, u32 block count, then per block
u32 {in, out, kh, kw, stride, pad, flags} followed by the kernel tensor
(out, in, kh, kw) and bias as little-endian float32. flags: bit0 = relu,
bit1 = max-pool. Precomputed-channel file (MCFP): magic, u32 version,
u32 layer count, per layer u32 {channels, height, width} + float32 planes.
"""

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .channels import MODEL_WIN_H, MODEL_WIN_W, ChannelStack
from .errors import ConfigError, IngestError, SequencingError, WeightsFormatError

WEIGHTS_MAGIC = b"MCFW"
WEIGHTS_VERSION = 1
PRECOMP_MAGIC = b"MCFP"
PRECOMP_VERSION = 1

_FLAG_RELU = 1
_FLAG_POOL = 2

DEFAULT_WIDTHS = (16, 32, 64, 96, 96)


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 1
    activation: str = "relu"
    pool: str = "max2"

    def __post_init__(self):
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel dims must be odd, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.pool not in ("max2", "none"):
            raise ConfigError(f"unknown pool {self.pool!r}")

    def out_shape(self, h, w):
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if self.pool == "max2":
            oh, ow = oh // 2, ow // 2
        if oh < 1 or ow < 1:
            raise ConfigError(
                f"conv output underflows to {oh}x{ow} for input {h}x{w}")
        return oh, ow

    def flags(self):
        return ((_FLAG_RELU if self.activation == "relu" else 0)
                | (_FLAG_POOL if self.pool == "max2" else 0))


@dataclass
class BackboneSpec:
    layers: list
    produces_layers: list = None  # 1-based block indices exported as MCF layers

    def __post_init__(self):
        if self.produces_layers is None:
            self.produces_layers = list(range(1, len(self.layers) + 1))
        if not self.layers:
            raise ConfigError("backbone must have at least one conv block")
        for e in self.produces_layers:
            if not 1 <= e <= len(self.layers):
                raise ConfigError(f"exported block {e} out of range")
        # exported spatial sizes must strictly decrease
        geos = self.export_geometries()
        for a, b in zip(geos, geos[1:]):
            if not (a[1] > b[1] and a[2] > b[2]):
                raise ConfigError("exported layer sizes must strictly decrease")

    def block_geometries(self, in_h=MODEL_WIN_H, in_w=MODEL_WIN_W):
        """(channels, h, w) of every block output for the model window."""
        out = []
        h, w = in_h, in_w
        for layer in self.layers:
            h, w = layer.out_shape(h, w)
            out.append((layer.out_channels, h, w))
        return out

    def export_geometries(self, in_h=MODEL_WIN_H, in_w=MODEL_WIN_W):
        blocks = self.block_geometries(in_h, in_w)
        return [blocks[e - 1] for e in self.produces_layers]


def default_backbone(widths=DEFAULT_WIDTHS):
    """3x3/s1/p1 relu + max-pool blocks; halves the spatial size per block."""
    layers = []
    cin = 3
    for cout in widths:
        layers.append(ConvLayerSpec(cin, cout))
        cin = cout
    return BackboneSpec(layers)


@dataclass
class BackboneWeights:
    spec: BackboneSpec
    tensors: list   # per block: (kernel (O,C,kh,kw) float32, bias (O,) float32)
    _hash: str = field(default=None, repr=False, compare=False)

    def content_hash(self):
        """sha256 of the serialized MCFW bytes; binds models to weights."""
        if self._hash is None:
            self._hash = hashlib.sha256(save_weights_bytes(self)).hexdigest()
        return self._hash


def random_weights(spec, seed):
    """Deterministic seeded initialization (scaled normal), for tests and
    as the default when no weights file is supplied."""
    rng = np.random.default_rng(seed)
    tensors = []
    for layer in spec.layers:
        kh, kw = layer.kernel
        fan_in = layer.in_channels * kh * kw
        std = np.sqrt(2.0 / fan_in)
        k = (rng.standard_normal((layer.out_channels, layer.in_channels, kh, kw))
             * std).astype(np.float32)
        b = np.zeros(layer.out_channels, dtype=np.float32)
        tensors.append((k, b))
    return BackboneWeights(spec, tensors)


def save_weights_bytes(bw):
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<II", WEIGHTS_VERSION, len(bw.spec.layers)))
    for layer, (k, b) in zip(bw.spec.layers, bw.tensors):
        kh, kw = layer.kernel
        buf.write(struct.pack("<7I", layer.in_channels, layer.out_channels,
                              kh, kw, layer.stride, layer.padding, layer.flags()))
        buf.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(path, bw):
    with open(path, "wb") as f:
        f.write(save_weights_bytes(bw))


def load_weights(path):
    """Parse and validate an MCFW file into BackboneWeights."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {magic!r}")
    version, n_layers = struct.unpack("<II", buf.read(8))
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    layers = []
    tensors = []
    for i in range(n_layers):
        hdr = buf.read(28)
        if len(hdr) != 28:
            raise WeightsFormatError(f"{path}: truncated header for layer {i + 1}")
        cin, cout, kh, kw, stride, pad, flags = struct.unpack("<7I", hdr)
        try:
            spec = ConvLayerSpec(
                cin, cout, (kh, kw), stride, pad,
                "relu" if flags & _FLAG_RELU else "none",
                "max2" if flags & _FLAG_POOL else "none")
        except ConfigError as e:
            raise WeightsFormatError(f"{path}: layer {i + 1}: {e}") from e
        nk = cout * cin * kh * kw
        kraw = buf.read(4 * nk)
        braw = buf.read(4 * cout)
        if len(kraw) != 4 * nk or len(braw) != 4 * cout:
            raise WeightsFormatError(f"{path}: truncated tensors for layer {i + 1}")
        k = np.frombuffer(kraw, dtype="<f4").reshape(cout, cin, kh, kw)
        b = np.frombuffer(braw, dtype="<f4")
        if not np.isfinite(k).all() or not np.isfinite(b).all():
            raise WeightsFormatError(f"{path}: non-finite weight in layer {i + 1}")
        layers.append(spec)
        tensors.append((k.astype(np.float32), b.astype(np.float32)))
    for a, b_ in zip(layers, layers[1:]):
        if a.out_channels != b_.in_channels:
            raise WeightsFormatError(
                f"{path}: channel mismatch between consecutive layers "
                f"({a.out_channels} -> {b_.in_channels})")
    try:
        spec = BackboneSpec(layers)
    except ConfigError as e:
        raise WeightsFormatError(f"{path}: {e}") from e
    bw = BackboneWeights(spec, tensors)
    bw._hash = hashlib.sha256(raw).hexdigest()
    return bw


def forward_layer(inp, layer, kernel, bias):
    """One conv block. inp may be a ChannelStack or (C, H, W) array."""
    data = inp.data if isinstance(inp, ChannelStack) else np.asarray(inp)
    if data.shape[0] != layer.in_channels:
        raise ConfigError(
            f"input has {data.shape[0]} channels, block expects {layer.in_channels}")
    layer.out_shape(data.shape[1], data.shape[2])  # raises on underflow
    out = kernels.conv_forward(
        np.ascontiguousarray(data, dtype=np.float32),
        np.ascontiguousarray(kernel, dtype=np.float32),
        np.ascontiguousarray(bias, dtype=np.float32),
        layer.stride, layer.padding,
        layer.activation == "relu", layer.pool == "max2")
    return out


@dataclass
class BoundLayer:
    """A channel stack bound to a window origin inside it.

    Detector windows reference a shared pyramid-level stack with a nonzero
    offset; per-window conv stacks use offset zero.
    """
    stack: ChannelStack
    oy: int = 0
    ox: int = 0


class MultiLayerChannels:
    """Per-window lazily populated layer stack (layer 1 = HOG+LUV, deeper
    layers = conv block outputs of the window crop)."""

    def __init__(self, window_id=None, crop=None):
        self.window_id = window_id
        self.crop = crop  # (3, 128, 64) float32, required for conv layers
        self._layers = {}
        self._blocks = []  # cached conv block outputs, index b-1

    def set_layer(self, index, stack, oy=0, ox=0):
        self._layers[index] = BoundLayer(stack, oy, ox)

    def populated(self, index):
        return index in self._layers

    def layer(self, index):
        if index not in self._layers:
            raise SequencingError(
                f"layer {index} evaluated before it was populated")
        return self._layers[index]

    def conv_block(self, block_idx, weights):
        """Output of conv block ``block_idx`` (1-based), resuming from the
        deepest cached block rather than recomputing the stack."""
        if self.crop is None:
            raise ConfigError("window has no crop; cannot compute conv layers")
        while len(self._blocks) < block_idx:
            b = len(self._blocks)
            inp = self.crop if b == 0 else self._blocks[b - 1]
            layer = weights.spec.layers[b]
            k, bias = weights.tensors[b]
            self._blocks.append(forward_layer(inp, layer, k, bias))
        return self._blocks[block_idx - 1]

    def release(self):
        """Drop cached tensors the moment the window is rejected."""
        self._blocks = []
        self._layers = {}
        self.crop = None


def compute_layer_for_window(window, weights, mcf_layer):
    """Populate and return MCF layer ``mcf_layer`` (>= 2) for a window.

    The conv block backing the layer comes from the backbone's exported
    block list; intermediate blocks are cached on the window.
    """
    if mcf_layer < 2:
        raise ConfigError("conv layers start at MCF layer 2")
    exports = weights.spec.produces_layers
    if mcf_layer - 2 >= len(exports):
        raise ConfigError(f"backbone exports only {len(exports)} layers")
    block = exports[mcf_layer - 2]
    data = window.conv_block(block, weights)
    stack = ChannelStack(mcf_layer, data)
    window.set_layer(mcf_layer, stack)
    return stack


def save_precomputed(path, mlc, n_layers):
    """Write a fully populated window as an MCFP file (layers 1..n_layers)."""
    buf = io.BytesIO()
    buf.write(PRECOMP_MAGIC)
    buf.write(struct.pack("<II", PRECOMP_VERSION, n_layers))
    for i in range(1, n_layers + 1):
        data = mlc.layer(i).stack.data
        c, h, w = data.shape
        buf.write(struct.pack("<III", c, h, w))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def ingest_precomputed(path, window_id, backbone_spec):
    """Load externally computed channels, bypassing forward computation.

    Layer 1 must be the 10-channel stack; layers 2..N must match the
    backbone's exported geometries exactly.
    """
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    magic = buf.read(4)
    if magic != PRECOMP_MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r}")
    version, n_layers = struct.unpack("<II", buf.read(8))
    if version != PRECOMP_VERSION:
        raise IngestError(f"{path}: unsupported version {version}")
    exports = backbone_spec.export_geometries()
    if n_layers != 1 + len(exports):
        raise IngestError(
            f"{path}: {n_layers} layers, backbone exports {1 + len(exports)}")
    mlc = MultiLayerChannels(window_id=window_id)
    for i in range(1, n_layers + 1):
        hdr = buf.read(12)
        if len(hdr) != 12:
            raise IngestError(f"{path}: truncated header for layer {i}")
        c, h, w = struct.unpack("<III", hdr)
        if i == 1:
            if c != 10:
                raise IngestError(f"{path}: layer 1 must have 10 channels, got {c}")
        else:
            want = exports[i - 2]
            if (c, h, w) != want:
                raise IngestError(
                    f"{path}: layer {i} geometry {(c, h, w)} != expected {want}")
        raw = buf.read(4 * c * h * w)
        if len(raw) != 4 * c * h * w:
            raise IngestError(f"{path}: truncated planes for layer {i}")
        data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
        mlc.set_layer(i, ChannelStack(i, data))
    return mlc
