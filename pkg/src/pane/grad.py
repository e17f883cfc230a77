"""Reverse-mode gradients over a recorded forward trace.

Everything here replays the trace backwards; no layer math is re-run
forward. The excitation chain never calls into this module and vice
versa, so gradient-based saliency and excitation-based saliency stay
independent routes all the way down.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .model import (
    AVGPOOL, BATCHNORM, CONV2D, FLATTEN, LINEAR, MAXPOOL, RELU,
    ForwardTrace, ModelGraph, _conv_taps, _kernel_rows,
)
from .tensor import F64, Tensor

PLAIN = "plain"
GUIDED = "guided"


@dataclass(frozen=True)
class GradRequest:
    model: ModelGraph
    trace: ForwardTrace
    class_index: int = 0
    mode: str = PLAIN
    tap_layer: int | None = None


def _check(req: GradRequest) -> None:
    if req.trace.model_hash != req.model.hash:
        raise ShapeError("trace was produced by a different model")
    if not 0 <= req.class_index < req.model.class_count:
        raise ShapeError(f"class index {req.class_index} out of range 0..{req.model.class_count - 1}")
    if req.mode not in (PLAIN, GUIDED):
        raise ShapeError(f"unknown grad mode {req.mode!r}")
    if len(req.trace.entries) != len(req.model.layers):
        raise ShapeError("incomplete trace")


def _bw_linear(layer, g: list[float]) -> list[float]:
    out, inf = layer.weight.shape
    data = layer.weight.data
    gin = [0.0] * inf
    for i in range(out):
        gv = g[i]
        if gv == 0.0:
            continue
        row = data[i * inf:(i + 1) * inf]
        for j in range(inf):
            gin[j] += gv * row[j]
    return gin


def _bw_conv(layer, g: list[float], in_shape: tuple[int, ...]) -> list[float]:
    c_in, h, w = in_shape
    c_out, _, kh, kw = layer.kernel.shape
    taps = _conv_taps(h, w, kh, kw, layer.stride, layer.padding)
    rows = _kernel_rows(layer)
    hw = h * w
    per = kh * kw
    npos = len(taps)
    gin = [0.0] * (c_in * hw)
    for co in range(c_out):
        row = rows[co]
        base = co * npos
        for pos, cell in enumerate(taps):
            gv = g[base + pos]
            if gv == 0.0:
                continue
            for c in range(c_in):
                cb = c * hw
                roff = c * per
                for ti, t in enumerate(cell):
                    if t >= 0:
                        gin[cb + t] += gv * row[roff + ti]
    return gin


def _bw_avgpool(layer, g: list[float], in_shape: tuple[int, ...]) -> list[float]:
    c, h, w = in_shape
    kh, kw = layer.window
    stride = layer.stride
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    inv = 1.0 / (kh * kw)
    gin = [0.0] * (c * h * w)
    i = 0
    for ch in range(c):
        base = ch * h * w
        for oy in range(oh):
            for ox in range(ow):
                gv = g[i] * inv
                i += 1
                if gv == 0.0:
                    continue
                start = base + (oy * stride) * w + ox * stride
                for ky in range(kh):
                    row = start + ky * w
                    for kx in range(kw):
                        gin[row + kx] += gv
    return gin


def _backward(model: ModelGraph, trace: ForwardTrace, seed: list[float],
              guided: bool = False, stop_boundary: int = 0,
              relu_probe: list | None = None) -> Tensor:
    """Fold the seed from the logits down to the given boundary (0 = input)."""
    g = list(seed)
    for n in range(len(model.layers) - 1, stop_boundary - 1, -1):
        layer = model.layers[n]
        entry = trace.entries[n]
        kind = layer.kind
        if kind == LINEAR:
            g = _bw_linear(layer, g)
        elif kind == CONV2D:
            g = _bw_conv(layer, g, model.boundary_shapes[n])
        elif kind == RELU:
            xs = entry.input.data
            if guided:
                g = [gv if gv > 0.0 and xs[i] > 0.0 else 0.0 for i, gv in enumerate(g)]
            else:
                g = [gv if xs[i] > 0.0 else 0.0 for i, gv in enumerate(g)]
            if relu_probe is not None:
                relu_probe.append((n, list(g)))
        elif kind == MAXPOOL:
            gin = [0.0] * len(entry.input.data)
            for i, src in enumerate(entry.argmax):
                gin[src] += g[i]
            g = gin
        elif kind == AVGPOOL:
            g = _bw_avgpool(layer, g, model.boundary_shapes[n])
        elif kind == BATCHNORM:
            scale = layer.bn_scale()
            c, h, w = model.boundary_shapes[n]
            hw = h * w
            g = [g[i] * scale[i // hw] for i in range(len(g))]
        elif kind == FLATTEN:
            pass
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    shape = model.boundary_shapes[stop_boundary]
    return Tensor(shape, g, F64, checked=False)


def _one_hot(model: ModelGraph, k: int) -> list[float]:
    seed = [0.0] * model.class_count
    seed[k] = 1.0
    return seed


def backward_input_grad(req: GradRequest) -> Tensor:
    """d logit[k] / d input, plain reverse mode."""
    _check(req)
    return _backward(req.model, req.trace, _one_hot(req.model, req.class_index), guided=False)


def guided_backward(req: GradRequest, relu_probe: list | None = None) -> Tensor:
    """As plain, but each ReLU also zeroes negative upstream gradient."""
    _check(req)
    return _backward(req.model, req.trace, _one_hot(req.model, req.class_index),
                     guided=True, relu_probe=relu_probe)


def feature_grad(req: GradRequest) -> Tensor:
    """d logit[k] / d (tap conv layer output), shaped like that feature map."""
    _check(req)
    tap = req.tap_layer
    if tap is None or not 0 <= tap < len(req.model.layers):
        raise ShapeError(f"tap layer {tap!r} out of range")
    if req.model.layers[tap].kind != CONV2D:
        raise ShapeError(f"tap layer {tap} is {req.model.layers[tap].kind}, expected conv")
    return _backward(req.model, req.trace, _one_hot(req.model, req.class_index),
                     guided=req.mode == GUIDED, stop_boundary=tap + 1)


def backward_from_seed(model: ModelGraph, trace: ForwardTrace, seed: Tensor,
                       guided: bool = False) -> Tensor:
    """Input gradient for an arbitrary cotangent over the logits (loss gradients)."""
    if seed.shape != (model.class_count,):
        raise ShapeError(f"seed shape {seed.shape} != logit vector [{model.class_count}]")
    if trace.model_hash != model.hash:
        raise ShapeError("trace was produced by a different model")
    return _backward(model, trace, list(seed.data), guided=guided)
