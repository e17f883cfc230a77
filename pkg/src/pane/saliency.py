"""Saliency map assembly and pixel ranking.

Excitation pairs turn into three map variants: the positive chain alone,
the negative chain alone, and their signed sum. Gradient baselines (
vanilla, guided, Grad-CAM, and a seeded random control) share the same
bundle type so the eval harness can treat every method uniformly.

PANE variants collapse channels by signed sum, keeping cancellation
between channels visible; gradient baselines collapse by absolute sum
per their usual conventions.
"""

from __future__ import annotations

import random as _random
from dataclasses import dataclass

from . import grad as gd
from .errors import ShapeError
from .chain import ExcitationPair
from .model import CONV2D, ForwardTrace, ModelGraph
from .tensor import F64, Tensor, add as t_add

PANE_POS = "pane_pos"
PANE_NEG = "pane_neg"
PANE_SUM = "pane_sum"
VBP = "vbp"
GUIDED_BP = "guided_bp"
GRADCAM = "gradcam"
RANDOM = "random"

DESC_VALUE = "desc_value"
DESC_SIGNED = "desc_signed"
ASC_ABS = "asc_abs"
ASC_SIGNED = "asc_signed"

COLLAPSE_NONE = "none"
COLLAPSE_CHANNEL_SUM = "channel_sum"


@dataclass
class SaliencyBundle:
    method: str
    map: Tensor
    collapse: str
    signed: bool

    def __post_init__(self):
        if self.collapse == COLLAPSE_CHANNEL_SUM and len(self.map.shape) != 2:
            raise ShapeError(f"collapsed map must be [H,W], got {self.map.shape}")


def _channel_sum(t: Tensor) -> Tensor:
    if len(t.shape) != 3:
        raise ShapeError(f"channel collapse expects [C,H,W], got {t.shape}")
    c, h, w = t.shape
    hw = h * w
    out = [0.0] * hw
    for ch in range(c):
        base = ch * hw
        for i in range(hw):
            out[i] += t.data[base + i]
    return Tensor((h, w), out, F64, checked=False)


def _channel_abs_sum(t: Tensor) -> Tensor:
    if len(t.shape) != 3:
        raise ShapeError(f"channel collapse expects [C,H,W], got {t.shape}")
    c, h, w = t.shape
    hw = h * w
    out = [0.0] * hw
    for ch in range(c):
        base = ch * hw
        for i in range(hw):
            out[i] += abs(t.data[base + i])
    return Tensor((h, w), out, F64, checked=False)


def assemble_pane(pair: ExcitationPair, variant: str,
                  collapse: str = COLLAPSE_CHANNEL_SUM) -> SaliencyBundle:
    if variant == "pos":
        raw = pair.pos
        method = PANE_POS
    elif variant == "neg":
        raw = pair.neg
        method = PANE_NEG
    elif variant == "sum":
        raw = t_add(pair.pos, pair.neg)
        method = PANE_SUM
    else:
        raise ShapeError(f"unknown variant {variant!r}; expected pos, neg, or sum")
    if collapse == COLLAPSE_CHANNEL_SUM:
        raw = _channel_sum(raw)
    elif collapse != COLLAPSE_NONE:
        raise ShapeError(f"unknown collapse mode {collapse!r}")
    return SaliencyBundle(method, raw, collapse, signed=variant == "sum")


def _last_conv(model: ModelGraph) -> int:
    convs = [i for i, layer in enumerate(model.layers) if layer.kind == CONV2D]
    if not convs:
        raise ShapeError("model has no conv layer to tap")
    return convs[-1]


def bilinear_upsample(src: Tensor, h: int, w: int) -> Tensor:
    """Resize a [h_s,w_s] map; sample points at (dst+0.5)*scale-0.5, edges clamped."""
    hs, ws = src.shape
    out = [0.0] * (h * w)
    sy = hs / h
    sx = ws / w
    data = src.data
    for dy in range(h):
        fy = (dy + 0.5) * sy - 0.5
        y0 = int(fy) if fy >= 0.0 else -1
        ty = fy - y0
        ya = min(max(y0, 0), hs - 1)
        yb = min(max(y0 + 1, 0), hs - 1)
        for dx in range(w):
            fx = (dx + 0.5) * sx - 0.5
            x0 = int(fx) if fx >= 0.0 else -1
            tx = fx - x0
            xa = min(max(x0, 0), ws - 1)
            xb = min(max(x0 + 1, 0), ws - 1)
            top = data[ya * ws + xa] * (1 - tx) + data[ya * ws + xb] * tx
            bot = data[yb * ws + xa] * (1 - tx) + data[yb * ws + xb] * tx
            out[dy * w + dx] = top * (1 - ty) + bot * ty
    return Tensor((h, w), out, F64, checked=False)


def gradcam(model: ModelGraph, trace: ForwardTrace, k: int) -> SaliencyBundle:
    """Feature maps of the last conv layer, weighted by mean feature gradient."""
    tap = _last_conv(model)
    fg = gd.feature_grad(gd.GradRequest(model, trace, k, tap_layer=tap))
    feat = trace.entries[tap].output
    c, fh, fw = feat.shape
    hw = fh * fw
    weights = [sum(fg.data[ch * hw:(ch + 1) * hw]) / hw for ch in range(c)]
    cam = [0.0] * hw
    for ch in range(c):
        wv = weights[ch]
        if wv == 0.0:
            continue
        base = ch * hw
        for i in range(hw):
            cam[i] += wv * feat.data[base + i]
    cam = [v if v > 0.0 else 0.0 for v in cam]
    _, h, w = model.input_shape
    up = bilinear_upsample(Tensor((fh, fw), cam, F64, checked=False), h, w)
    return SaliencyBundle(GRADCAM, up, COLLAPSE_CHANNEL_SUM, signed=False)


def baseline_map(model: ModelGraph, trace: ForwardTrace, k: int, method: str,
                 seed: int = 0) -> SaliencyBundle:
    _, h, w = model.input_shape if len(model.input_shape) == 3 else (1, 1, model.input_shape[0])
    if method == VBP:
        g = gd.backward_input_grad(gd.GradRequest(model, trace, k))
        return SaliencyBundle(VBP, _channel_abs_sum(g), COLLAPSE_CHANNEL_SUM, signed=False)
    if method == GUIDED_BP:
        g = gd.guided_backward(gd.GradRequest(model, trace, k, mode=gd.GUIDED))
        return SaliencyBundle(GUIDED_BP, _channel_abs_sum(g), COLLAPSE_CHANNEL_SUM, signed=False)
    if method == RANDOM:
        rng = _random.Random(seed)
        vals = [rng.random() for _ in range(h * w)]
        return SaliencyBundle(RANDOM, Tensor((h, w), vals, F64, checked=False),
                              COLLAPSE_CHANNEL_SUM, signed=False)
    raise ShapeError(f"unknown baseline method {method!r}")


def rank_pixels(bundle: SaliencyBundle, order: str, ratio: float) -> list[tuple[int, int]]:
    """Deterministic prefix of the pixel ranking; ties fall back to row-major order."""
    if not 0.0 < ratio <= 1.0:
        raise ShapeError(f"ratio must be in (0, 1], got {ratio}")
    if len(bundle.map.shape) != 2:
        raise ShapeError(f"ranking needs a collapsed [H,W] map, got {bundle.map.shape}")
    h, w = bundle.map.shape
    vals = bundle.map.data
    n = h * w
    # the nudge keeps floor() honest when ratio*n lands a hair under an integer
    count = max(1, int(ratio * n + 1e-9))
    if order in (DESC_VALUE, DESC_SIGNED):
        key = lambda i: (-vals[i], i)
    elif order == ASC_ABS:
        key = lambda i: (abs(vals[i]), i)
    elif order == ASC_SIGNED:
        key = lambda i: (vals[i], i)
    else:
        raise ShapeError(f"unknown ranking order {order!r}")
    chosen = sorted(range(n), key=key)[:count]
    return [(i // w, i % w) for i in chosen]
