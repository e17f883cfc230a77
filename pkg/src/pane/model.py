"""Layer descriptions, weight-file (de)serialization, and the recording forward pass.

The forward pass keeps, for every layer, the input, the pre-bias output
(output minus the layer's bias/shift term), the post output, and max-pool
argmax indices. Those recorded signals are exactly what the excitation
rules and the gradient engine consume later; neither ever re-runs layer
math.

Weight file layout (magic ``PANEW001``, little-endian throughout):
u32 layer count; per layer: u8 kind code (1=Linear, 2=Conv2d, 3=ReLU,
4=MaxPool, 5=AvgPool, 6=BatchNorm, 7=Flatten), u16 name length + UTF-8
name, kind-specific u32 geometry header (f32 eps for BatchNorm), f32
parameter payload; then a metadata block (u32 byte length + UTF-8 JSON
carrying at least ``input_shape`` and ``class_count``); trailing u32
CRC32 of all preceding bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import zlib
from array import array
from dataclasses import dataclass, field
from functools import lru_cache
from operator import mul as _mul

from .errors import FormatError, NumericError, ShapeError
from .tensor import F32, F64, Tensor, atomic_write_bytes

MAGIC = b"PANEW001"

LINEAR = "linear"
CONV2D = "conv2d"
RELU = "relu"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
BATCHNORM = "batchnorm"
FLATTEN = "flatten"

_KIND_CODE = {LINEAR: 1, CONV2D: 2, RELU: 3, MAXPOOL: 4, AVGPOOL: 5, BATCHNORM: 6, FLATTEN: 7}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def float_mode_default() -> str:
    """Runtime activation dtype; PANE_FLOAT_MODE in {f32,f64} overrides (default f32)."""
    mode = os.environ.get("PANE_FLOAT_MODE", F32)
    if mode not in (F32, F64):
        raise ValueError(f"PANE_FLOAT_MODE must be f32 or f64, got {mode!r}")
    return mode


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    weight: Tensor | None = None      # linear [out,in]
    bias: Tensor | None = None        # linear/conv [out]
    kernel: Tensor | None = None      # conv [C_out,C_in,kh,kw]
    stride: int = 1                   # conv/pools
    padding: int = 0                  # conv only
    window: tuple[int, int] | None = None   # pools (kh,kw)
    gamma: Tensor | None = None       # bn, per channel
    beta: Tensor | None = None
    mean: Tensor | None = None
    var: Tensor | None = None
    eps: float = 0.0

    def bn_scale(self) -> list[float]:
        """Per-channel effective weight gamma / (sqrt(var) + eps)."""
        return [g / (math.sqrt(v) + self.eps) for g, v in zip(self.gamma.data, self.var.data)]

    def bn_shift(self) -> list[float]:
        return [b - m * w for b, m, w in zip(self.beta.data, self.mean.data, self.bn_scale())]


def linear(weight: Tensor, bias: Tensor, name: str = "") -> LayerSpec:
    if len(weight.shape) != 2:
        raise ShapeError(f"linear weight must be [out,in], got {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} != out features {weight.shape[0]}")
    return LayerSpec(LINEAR, name, weight=weight.astype(F64), bias=bias.astype(F64))


def conv2d(kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, name: str = "") -> LayerSpec:
    if len(kernel.shape) != 4:
        raise ShapeError(f"conv kernel must be [C_out,C_in,kh,kw], got {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv bias {bias.shape} != out channels {kernel.shape[0]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv stride {stride} / padding {padding} out of range")
    return LayerSpec(CONV2D, name, kernel=kernel.astype(F64), bias=bias.astype(F64),
                     stride=stride, padding=padding)


def relu(name: str = "") -> LayerSpec:
    return LayerSpec(RELU, name)


def maxpool(window: tuple[int, int], stride: int, name: str = "") -> LayerSpec:
    return _pool(MAXPOOL, window, stride, name)


def avgpool(window: tuple[int, int], stride: int, name: str = "") -> LayerSpec:
    return _pool(AVGPOOL, window, stride, name)


def _pool(kind: str, window: tuple[int, int], stride: int, name: str) -> LayerSpec:
    kh, kw = window
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError(f"pool window {window} / stride {stride} out of range")
    return LayerSpec(kind, name, window=(int(kh), int(kw)), stride=int(stride))


def batchnorm(gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: float, name: str = "") -> LayerSpec:
    shapes = {gamma.shape, beta.shape, mean.shape, var.shape}
    if len(shapes) != 1 or len(gamma.shape) != 1:
        raise ShapeError(f"batchnorm params must share one [C] shape, got {sorted(shapes)}")
    if eps <= 0.0:
        raise ShapeError(f"batchnorm eps must be positive, got {eps}")
    if any(v < 0.0 for v in var.data):
        raise ShapeError("batchnorm running variance has negative entries")
    return LayerSpec(BATCHNORM, name, gamma=gamma.astype(F64), beta=beta.astype(F64),
                     mean=mean.astype(F64), var=var.astype(F64), eps=float(eps))


def flatten(name: str = "") -> LayerSpec:
    return LayerSpec(FLATTEN, name)


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == LINEAR:
        if len(in_shape) != 1:
            raise ShapeError(f"linear expects rank-1 input, got {in_shape} (insert a flatten layer)")
        out, inf = layer.weight.shape
        if in_shape[0] != inf:
            raise ShapeError(f"linear expects {inf} inputs, got {in_shape[0]}")
        return (out,)
    if kind == CONV2D:
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects [C,H,W] input, got {in_shape}")
        c_out, c_in, kh, kw = layer.kernel.shape
        c, h, w = in_shape
        if c != c_in:
            raise ShapeError(f"conv expects {c_in} input channels, got {c}")
        oh = (h - kh + 2 * layer.padding) // layer.stride + 1
        ow = (w - kw + 2 * layer.padding) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv kernel {kh}x{kw} does not fit input {h}x{w} (padding {layer.padding})")
        return (c_out, oh, ow)
    if kind in (MAXPOOL, AVGPOOL):
        if len(in_shape) != 3:
            raise ShapeError(f"pool expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = layer.window
        oh = (h - kh) // layer.stride + 1
        ow = (w - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {kh}x{kw} does not fit input {h}x{w}")
        return (c, oh, ow)
    if kind == BATCHNORM:
        if len(in_shape) != 3:
            raise ShapeError(f"batchnorm expects [C,H,W] input, got {in_shape}")
        if in_shape[0] != layer.gamma.shape[0]:
            raise ShapeError(f"batchnorm has {layer.gamma.shape[0]} channels, input has {in_shape[0]}")
        return in_shape
    if kind == RELU:
        return in_shape
    if kind == FLATTEN:
        n = 1
        for e in in_shape:
            n *= e
        return (n,)
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    class_count: int
    name: str = "model"
    meta: dict = field(default_factory=dict)
    meta_raw: bytes = b""
    _hash: str = ""

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.boundary_shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.boundary_shapes.append(layer_output_shape(layer, self.boundary_shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i + 1} ({layer.kind} {layer.name!r}): {exc}") from None
        if self.boundary_shapes[-1] != (self.class_count,):
            raise ShapeError(
                f"final output shape {self.boundary_shapes[-1]} != logit vector [{self.class_count}]"
            )
        if not self.meta_raw:
            self.meta = dict(self.meta)
            self.meta.setdefault("name", self.name)
            self.meta.setdefault("input_shape", list(self.input_shape))
            self.meta.setdefault("class_count", self.class_count)
            self.meta_raw = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()

    @property
    def hash(self) -> str:
        if not self._hash:
            self._hash = hashlib.sha256(save_model(self)).hexdigest()
        return self._hash


@dataclass
class LayerTrace:
    input: Tensor
    prebias: Tensor
    output: Tensor
    argmax: list[int] | None = None   # max-pool only: flat index into the layer input


@dataclass
class ForwardTrace:
    model_hash: str
    input: Tensor
    entries: list[LayerTrace]
    hash: str = ""

    def __post_init__(self):
        if not self.hash:
            digest = hashlib.sha256()
            digest.update(self.model_hash.encode())
            digest.update(self.input.data.tobytes())
            self.hash = digest.hexdigest()


def logits(trace: ForwardTrace) -> Tensor:
    """Final layer output; no softmax is ever applied inside the graph."""
    if not trace.entries:
        return trace.input
    return trace.entries[-1].output


def softmax(t: Tensor) -> Tensor:
    vals = list(t.data)
    for v in vals:
        if not math.isfinite(v):
            raise NumericError(f"non-finite logit {v!r}")
    top = max(vals)
    exps = [math.exp(v - top) for v in vals]
    total = sum(exps)
    return Tensor(t.shape, [e / total for e in exps], F64, checked=False)


@lru_cache(maxsize=256)
def _conv_taps(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple:
    """Per output position: tuple of spatial flat input indices, -1 where padded."""
    oh = (h - kh + 2 * padding) // stride + 1
    ow = (w - kw + 2 * padding) // stride + 1
    taps = []
    for oy in range(oh):
        for ox in range(ow):
            iy0 = oy * stride - padding
            ix0 = ox * stride - padding
            cell = []
            for ky in range(kh):
                iy = iy0 + ky
                for kx in range(kw):
                    ix = ix0 + kx
                    cell.append(iy * w + ix if 0 <= iy < h and 0 <= ix < w else -1)
            taps.append(tuple(cell))
    return tuple(taps)


def _kernel_rows(layer: LayerSpec) -> list[list[float]]:
    c_out, c_in, kh, kw = layer.kernel.shape
    per = c_in * kh * kw
    data = layer.kernel.data
    return [list(data[co * per:(co + 1) * per]) for co in range(c_out)]


def _forward_linear(layer: LayerSpec, xs: list[float]) -> list[float]:
    out, inf = layer.weight.shape
    data = layer.weight.data
    return [sum(map(_mul, data[i * inf:(i + 1) * inf], xs)) for i in range(out)]


def _forward_conv(layer: LayerSpec, xs: list[float], in_shape: tuple[int, ...]) -> list[float]:
    c_in, h, w = in_shape
    c_out, _, kh, kw = layer.kernel.shape
    taps = _conv_taps(h, w, kh, kw, layer.stride, layer.padding)
    rows = _kernel_rows(layer)
    hw = h * w
    npos = len(taps)
    prebias = [0.0] * (c_out * npos)
    for pos, cell in enumerate(taps):
        patch = []
        for c in range(c_in):
            base = c * hw
            patch += [xs[base + t] if t >= 0 else 0.0 for t in cell]
        for co in range(c_out):
            prebias[co * npos + pos] = sum(map(_mul, rows[co], patch))
    return prebias


def _forward_pool(layer: LayerSpec, xs: list[float], in_shape: tuple[int, ...], want_argmax: bool):
    c, h, w = in_shape
    kh, kw = layer.window
    stride = layer.stride
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = []
    argmax = [] if want_argmax else None
    inv = 1.0 / (kh * kw)
    for ch in range(c):
        base = ch * h * w
        for oy in range(oh):
            for ox in range(ow):
                start = base + (oy * stride) * w + ox * stride
                if want_argmax:
                    best = xs[start]
                    best_at = start
                    for ky in range(kh):
                        row = start + ky * w
                        for kx in range(kw):
                            v = xs[row + kx]
                            if v > best:
                                best = v
                                best_at = row + kx
                    out.append(best)
                    argmax.append(best_at)
                else:
                    acc = 0.0
                    for ky in range(kh):
                        row = start + ky * w
                        for kx in range(kw):
                            acc += xs[row + kx]
                    out.append(acc * inv)
    return out, argmax


def forward(model: ModelGraph, x: Tensor, dtype: str | None = None, checked: bool | None = None) -> ForwardTrace:
    """Run the net on one sample, recording every signal the explainers need."""
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input {model.input_shape}")
    if dtype is None:
        dtype = float_mode_default()
    entries: list[LayerTrace] = []
    cur = x if x.dtype == dtype else x.astype(dtype)
    for n, layer in enumerate(model.layers):
        in_shape = model.boundary_shapes[n]
        out_shape = model.boundary_shapes[n + 1]
        xs = list(cur.data)
        argmax = None
        kind = layer.kind
        if kind == LINEAR:
            pre = _forward_linear(layer, xs)
            prebias_t = Tensor(out_shape, pre, dtype, checked=False)
            bias = layer.bias.data
            out_t = Tensor(out_shape, [p + b for p, b in zip(prebias_t.data, bias)], dtype, checked=False)
        elif kind == CONV2D:
            pre = _forward_conv(layer, xs, in_shape)
            prebias_t = Tensor(out_shape, pre, dtype, checked=False)
            bias = layer.bias.data
            npos = out_shape[1] * out_shape[2]
            out = list(prebias_t.data)
            for co in range(out_shape[0]):
                b = bias[co]
                for pos in range(npos):
                    out[co * npos + pos] += b
            out_t = Tensor(out_shape, out, dtype, checked=False)
        elif kind == RELU:
            out_t = Tensor(out_shape, [v if v > 0.0 else 0.0 for v in xs], dtype, checked=False)
            prebias_t = out_t
        elif kind == MAXPOOL:
            out, argmax = _forward_pool(layer, xs, in_shape, want_argmax=True)
            out_t = Tensor(out_shape, out, dtype, checked=False)
            prebias_t = out_t
        elif kind == AVGPOOL:
            out, _ = _forward_pool(layer, xs, in_shape, want_argmax=False)
            out_t = Tensor(out_shape, out, dtype, checked=False)
            prebias_t = out_t
        elif kind == BATCHNORM:
            scale = layer.bn_scale()
            shift = layer.bn_shift()
            c, h, w = in_shape
            hw = h * w
            pre = [0.0] * len(xs)
            for ch in range(c):
                s = scale[ch]
                base = ch * hw
                for i in range(base, base + hw):
                    pre[i] = s * xs[i]
            prebias_t = Tensor(out_shape, pre, dtype, checked=False)
            out = list(prebias_t.data)
            for ch in range(c):
                b = shift[ch]
                base = ch * hw
                for i in range(base, base + hw):
                    out[i] += b
            out_t = Tensor(out_shape, out, dtype, checked=False)
        elif kind == FLATTEN:
            out_t = cur.reshape(out_shape)
            prebias_t = out_t
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if checked:
            for v in out_t.data:
                if not math.isfinite(v):
                    raise NumericError(f"non-finite activation in layer {n + 1} ({kind})")
        entries.append(LayerTrace(cur, prebias_t, out_t, argmax))
        cur = out_t
    return ForwardTrace(model.hash, x, entries)


# --- serialization ---------------------------------------------------------

def _pack_f32(t: Tensor) -> bytes:
    return struct.pack(f"<{len(t.data)}f", *t.data)


def _layer_record(layer: LayerSpec) -> bytes:
    name = layer.name.encode()
    rec = struct.pack("<BH", _KIND_CODE[layer.kind], len(name)) + name
    kind = layer.kind
    if kind == LINEAR:
        out, inf = layer.weight.shape
        rec += struct.pack("<II", out, inf) + _pack_f32(layer.weight) + _pack_f32(layer.bias)
    elif kind == CONV2D:
        c_out, c_in, kh, kw = layer.kernel.shape
        rec += struct.pack("<IIIIII", c_out, c_in, kh, kw, layer.stride, layer.padding)
        rec += _pack_f32(layer.kernel) + _pack_f32(layer.bias)
    elif kind in (MAXPOOL, AVGPOOL):
        rec += struct.pack("<III", layer.window[0], layer.window[1], layer.stride)
    elif kind == BATCHNORM:
        rec += struct.pack("<If", layer.gamma.shape[0], layer.eps)
        for t in (layer.gamma, layer.beta, layer.mean, layer.var):
            rec += _pack_f32(t)
    return rec


def save_model(model: ModelGraph) -> bytes:
    body = MAGIC + struct.pack("<I", len(model.layers))
    for layer in model.layers:
        body += _layer_record(layer)
    body += struct.pack("<I", len(model.meta_raw)) + model.meta_raw
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"truncated stream at byte {self.off} while reading {what}")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32_tensor(self, shape: tuple[int, ...], what: str) -> Tensor:
        n = 1
        for e in shape:
            n *= e
        vals = struct.unpack(f"<{n}f", self.take(4 * n, what))
        return Tensor(shape, vals, F64, checked=False)


def load_model(data: bytes) -> ModelGraph:
    """Parse and validate a PANEW001 byte stream (CRC, shapes, layer chain)."""
    if len(data) < len(MAGIC) + 8:
        raise FormatError(f"stream of {len(data)} bytes is too short for a weight file")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    body, crc_bytes = data[:-4], data[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise FormatError("CRC32 mismatch (corrupt or truncated file)")
    rd = _Reader(body)
    rd.off = len(MAGIC)
    layer_count = rd.u32("layer count")
    layers = []
    for li in range(layer_count):
        code, name_len = struct.unpack("<BH", rd.take(3, f"layer {li + 1} header"))
        if code not in _CODE_KIND:
            raise FormatError(f"unknown layer kind code {code} in layer {li + 1}")
        kind = _CODE_KIND[code]
        name = rd.take(name_len, f"layer {li + 1} name").decode()
        if kind == LINEAR:
            out = rd.u32("linear out")
            inf = rd.u32("linear in")
            w = rd.f32_tensor((out, inf), f"layer {li + 1} weight")
            b = rd.f32_tensor((out,), f"layer {li + 1} bias")
            layers.append(linear(w, b, name))
        elif kind == CONV2D:
            geom = [rd.u32(f"conv field {i}") for i in range(6)]
            c_out, c_in, kh, kw, stride, padding = geom
            k = rd.f32_tensor((c_out, c_in, kh, kw), f"layer {li + 1} kernel")
            b = rd.f32_tensor((c_out,), f"layer {li + 1} bias")
            layers.append(conv2d(k, b, stride, padding, name))
        elif kind in (MAXPOOL, AVGPOOL):
            kh = rd.u32("pool kh")
            kw = rd.u32("pool kw")
            stride = rd.u32("pool stride")
            layers.append(maxpool((kh, kw), stride, name) if kind == MAXPOOL
                          else avgpool((kh, kw), stride, name))
        elif kind == BATCHNORM:
            c = rd.u32("batchnorm channels")
            eps = struct.unpack("<f", rd.take(4, "batchnorm eps"))[0]
            params = [rd.f32_tensor((c,), f"layer {li + 1} bn param {i}") for i in range(4)]
            layers.append(batchnorm(*params, eps, name))
        elif kind == RELU:
            layers.append(relu(name))
        else:
            layers.append(flatten(name))
    meta_len = rd.u32("metadata length")
    meta_raw = rd.take(meta_len, "metadata")
    if rd.off != len(body):
        raise FormatError(f"{len(body) - rd.off} unexpected trailing bytes at offset {rd.off}")
    try:
        meta = json.loads(meta_raw) if meta_raw else {}
    except ValueError as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}") from None
    if "input_shape" not in meta or "class_count" not in meta:
        raise FormatError("metadata must carry input_shape and class_count")
    graph = ModelGraph(
        layers,
        tuple(meta["input_shape"]),
        int(meta["class_count"]),
        name=meta.get("name", "model"),
        meta=meta,
        meta_raw=meta_raw,
    )
    graph._hash = hashlib.sha256(data).hexdigest()
    return graph


def load_model_file(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def save_model_file(model: ModelGraph, path) -> None:
    atomic_write_bytes(path, save_model(model))
