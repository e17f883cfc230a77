"""End-to-end double-chain propagation from a target logit to the input.

Two routes compute the same object. ``pane_explain`` is the engine: it
seeds a one-hot coefficient row at the logit boundary and folds the
per-layer chain steps backwards, never materializing anything wider
than one boundary. ``dense_oracle`` is the brute-force reference: it
materializes every layer's positive/negative split matrices and
composes them bottom-up with explicit products

    M_pos' = A_pos @ M_pos + A_neg @ M_neg
    M_neg' = A_pos @ M_neg + A_neg @ M_pos

then reads off row k. The two share the classification rule and nothing
else; their agreement is the core correctness check of this package.

Chain steps always accumulate in 64-bit floats, regardless of the
activation float mode, because the sign-split partial sums cancel
heavily.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import excitation as ex
from .errors import FormatError, NumericError, ShapeError
from .model import (
    AVGPOOL, BATCHNORM, CONV2D, FLATTEN, LINEAR, MAXPOOL, RELU,
    ForwardTrace, ModelGraph,
)
from .tensor import F64, Tensor, atomic_write_bytes, load_tensor, tensor_to_bytes

ORACLE_BOUNDARY_LIMIT = 4096
DENSE_BOUNDARY_LIMIT = 1 << 16


@dataclass
class ExcitationPair:
    pos: Tensor
    neg: Tensor
    class_index: int
    model_hash: str
    trace_hash: str
    mode: str

    def __post_init__(self):
        if self.pos.shape != self.neg.shape:
            raise ShapeError(f"pair halves disagree: {self.pos.shape} vs {self.neg.shape}")
        for t in (self.pos, self.neg):
            for v in t.data:
                if not math.isfinite(v):
                    raise NumericError(f"non-finite excitation coefficient {v!r}")


def _check_pair_inputs(model: ModelGraph, trace: ForwardTrace, k: int) -> None:
    if trace.model_hash != model.hash:
        raise ShapeError("trace was produced by a different model")
    if len(trace.entries) != len(model.layers):
        raise ShapeError("incomplete trace")
    if not 0 <= k < model.class_count:
        raise ShapeError(f"class index {k} out of range 0..{model.class_count - 1}")


def _trace_mode(trace: ForwardTrace) -> str:
    return trace.entries[-1].output.dtype if trace.entries else trace.input.dtype


def _chain_step(model: ModelGraph, trace: ForwardTrace, n: int, r: ex.ChainState) -> ex.ChainState:
    layer = model.layers[n]
    entry = trace.entries[n]
    kind = layer.kind
    if kind == LINEAR:
        return ex.chain_back_linear(layer, entry.input, entry.prebias, r)
    if kind == CONV2D:
        return ex.chain_back_conv(layer, entry.input, entry.prebias, r)
    if kind == RELU:
        return ex.chain_back_relu(entry.input, r)
    if kind == MAXPOOL:
        return ex.chain_back_maxpool(layer, entry.input, entry.argmax, r)
    if kind == AVGPOOL:
        return ex.chain_back_avgpool(layer, entry.input, entry.prebias, r)
    if kind == BATCHNORM:
        return ex.chain_back_bn(layer, entry.input, r)
    if kind == FLATTEN:
        return ex.chain_back_flatten(r, model.boundary_shapes[n])
    raise ValueError(f"unknown layer kind {kind!r}")


def _propagate(model: ModelGraph, trace: ForwardTrace, seed: ex.ChainState,
               from_boundary: int, to_boundary: int) -> ex.ChainState:
    """Fold chain steps from one boundary down to an earlier one."""
    r = seed
    for n in range(from_boundary - 1, to_boundary - 1, -1):
        r = _chain_step(model, trace, n, r)
    return r


def pane_explain(model: ModelGraph, trace: ForwardTrace, k: int) -> ExcitationPair:
    """Positive and negative excitation rows of class k over the input pixels."""
    _check_pair_inputs(model, trace, k)
    shape = model.boundary_shapes[-1]
    pos = [0.0] * model.class_count
    pos[k] = 1.0
    seed = ex.ChainState(Tensor(shape, pos, F64, checked=False),
                         Tensor(shape, [0.0] * model.class_count, F64, checked=False))
    r = _propagate(model, trace, seed, len(model.layers), 0)
    return ExcitationPair(r.r_pos, r.r_neg, k, model.hash, trace.hash, _trace_mode(trace))


# --- dense reference route ---------------------------------------------------

def _boundary_size(model: ModelGraph, n: int) -> int:
    size = 1
    for e in model.boundary_shapes[n]:
        size *= e
    return size


def _layer_split_rows(layer, entry, in_shape):
    """Sparse rows [(input index, coefficient)] of the layer's A_pos/A_neg.

    Geometry is spelled out with explicit bounds arithmetic rather than
    shared index tables, so this stays an independent route from the
    chain steps.
    """
    xs = list(entry.input.data)
    ob = list(entry.prebias.data)
    kind = layer.kind
    a_pos: list[list[tuple[int, float]]] = []
    a_neg: list[list[tuple[int, float]]] = []

    def push(terms, o):
        rp, rn = [], []
        for j, t, coeff in terms:
            cls = ex.classify_term(t, o)
            if cls == 1:
                rp.append((j, coeff))
            elif cls == -1:
                rn.append((j, coeff))
        a_pos.append(rp)
        a_neg.append(rn)

    if kind == LINEAR:
        out, inf = layer.weight.shape
        for i in range(out):
            row = layer.weight.data[i * inf:(i + 1) * inf]
            push([(j, row[j] * xs[j], row[j]) for j in range(inf)], ob[i])
    elif kind == CONV2D:
        c_in, h, w = in_shape
        c_out, _, kh, kw = layer.kernel.shape
        s, p = layer.stride, layer.padding
        oh = (h - kh + 2 * p) // s + 1
        ow = (w - kw + 2 * p) // s + 1
        i = 0
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    terms = []
                    for ci in range(c_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * s - p + ky
                                ix = ox * s - p + kx
                                if 0 <= iy < h and 0 <= ix < w:
                                    j = ci * h * w + iy * w + ix
                                    wv = layer.kernel.at(co, ci, ky, kx)
                                    terms.append((j, wv * xs[j], wv))
                    push(terms, ob[i])
                    i += 1
    elif kind == RELU:
        for j, v in enumerate(xs):
            if v > 0.0:
                a_pos.append([(j, 1.0)])
            else:
                a_pos.append([])
            a_neg.append([])
    elif kind == MAXPOOL:
        for i, src in enumerate(entry.argmax):
            a_pos.append([(src, 1.0)])
            a_neg.append([])
    elif kind == AVGPOOL:
        c, h, w = in_shape
        kh, kw = layer.window
        s = layer.stride
        oh = (h - kh) // s + 1
        ow = (w - kw) // s + 1
        inv = 1.0 / (kh * kw)
        i = 0
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    terms = []
                    for ky in range(kh):
                        for kx in range(kw):
                            j = ch * h * w + (oy * s + ky) * w + ox * s + kx
                            terms.append((j, xs[j] * inv, inv))
                    push(terms, ob[i])
                    i += 1
    elif kind == BATCHNORM:
        c, h, w = in_shape
        scale = layer.bn_scale()
        for ch in range(c):
            sv = scale[ch]
            for j in range(ch * h * w, (ch + 1) * h * w):
                push([(j, sv * xs[j], sv)], ob[j])
    elif kind == FLATTEN:
        for j in range(len(xs)):
            a_pos.append([(j, 1.0)])
            a_neg.append([])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return a_pos, a_neg


def _compose(a_pos, a_neg, m_pos, m_neg, in_dim):
    """One bottom-up step: (A_pos, A_neg) applied onto composite (M_pos, M_neg)."""
    new_pos, new_neg = [], []
    for rp, rn in zip(a_pos, a_neg):
        accp = [0.0] * in_dim
        accn = [0.0] * in_dim
        for j, v in rp:
            accp = [a + v * b for a, b in zip(accp, m_pos[j])]
            accn = [a + v * b for a, b in zip(accn, m_neg[j])]
        for j, v in rn:
            accp = [a + v * b for a, b in zip(accp, m_neg[j])]
            accn = [a + v * b for a, b in zip(accn, m_pos[j])]
        new_pos.append(accp)
        new_neg.append(accn)
    return new_pos, new_neg


def _materialize(model: ModelGraph, trace: ForwardTrace, from_boundary: int, to_boundary: int):
    """Full composite split matrices between two boundaries, bottom-up."""
    in_dim = _boundary_size(model, to_boundary)
    m_pos = [[1.0 if c == r else 0.0 for c in range(in_dim)] for r in range(in_dim)]
    m_neg = [[0.0] * in_dim for _ in range(in_dim)]
    for n in range(to_boundary, from_boundary):
        a_pos, a_neg = _layer_split_rows(model.layers[n], trace.entries[n],
                                         model.boundary_shapes[n])
        m_pos, m_neg = _compose(a_pos, a_neg, m_pos, m_neg, in_dim)
    return m_pos, m_neg


def dense_oracle(model: ModelGraph, trace: ForwardTrace, k: int) -> ExcitationPair:
    """Brute-force reference for pane_explain; only for tiny models."""
    _check_pair_inputs(model, trace, k)
    for n in range(len(model.boundary_shapes)):
        size = _boundary_size(model, n)
        if size > ORACLE_BOUNDARY_LIMIT:
            raise ShapeError(f"boundary {n} has {size} elements; oracle limit is {ORACLE_BOUNDARY_LIMIT}")
    m_pos, m_neg = _materialize(model, trace, len(model.layers), 0)
    shape = model.input_shape
    return ExcitationPair(
        Tensor(shape, m_pos[k], F64, checked=False),
        Tensor(shape, m_neg[k], F64, checked=False),
        k, model.hash, trace.hash, _trace_mode(trace))


def pane_layer_to_layer(model: ModelGraph, trace: ForwardTrace, i: int, j: int,
                        restrict: int | None = None) -> tuple[Tensor, Tensor]:
    """Composite split matrices between boundary j and boundary i (i > j).

    Without ``restrict`` the full [dim(O_i), dim(O_j)] pair is
    materialized bottom-up (every boundary in between must stay within
    the dense size guard). With ``restrict`` only that output cell's row
    is computed, by folding the chain steps of the engine route, and the
    result is a [1, dim(O_j)] pair.
    """
    if trace.model_hash != model.hash:
        raise ShapeError("trace was produced by a different model")
    if not 0 <= j < i <= len(model.layers):
        raise ShapeError(f"need layer boundaries 0 <= j < i <= {len(model.layers)}, got i={i} j={j}")
    dim_i = _boundary_size(model, i)
    dim_j = _boundary_size(model, j)
    if restrict is not None:
        if not 0 <= restrict < dim_i:
            raise ShapeError(f"restrict cell {restrict} out of range for boundary of {dim_i}")
        shape = model.boundary_shapes[i]
        pos = [0.0] * dim_i
        pos[restrict] = 1.0
        seed = ex.ChainState(Tensor(shape, pos, F64, checked=False),
                             Tensor(shape, [0.0] * dim_i, F64, checked=False))
        r = _propagate(model, trace, seed, i, j)
        return (Tensor((1, dim_j), list(r.r_pos.data), F64, checked=False),
                Tensor((1, dim_j), list(r.r_neg.data), F64, checked=False))
    for n in range(j, i + 1):
        size = _boundary_size(model, n)
        if size > DENSE_BOUNDARY_LIMIT:
            raise ShapeError(f"boundary {n} has {size} elements; dense limit is {DENSE_BOUNDARY_LIMIT}")
    m_pos, m_neg = _materialize(model, trace, i, j)
    flat_pos = [v for row in m_pos for v in row]
    flat_neg = [v for row in m_neg for v in row]
    return (Tensor((dim_i, dim_j), flat_pos, F64, checked=False),
            Tensor((dim_i, dim_j), flat_neg, F64, checked=False))


# --- pair serialization ------------------------------------------------------

def save_pair(pair: ExcitationPair, prefix) -> list[str]:
    """Write <prefix>.pos.ptnsr, <prefix>.neg.ptnsr and <prefix>.json."""
    prefix = str(prefix)
    sidecar = {
        "model_hash": pair.model_hash,
        "trace_hash": pair.trace_hash,
        "class_index": pair.class_index,
        "mode": pair.mode,
    }
    paths = [prefix + ".pos.ptnsr", prefix + ".neg.ptnsr", prefix + ".json"]
    atomic_write_bytes(paths[0], tensor_to_bytes(pair.pos))
    atomic_write_bytes(paths[1], tensor_to_bytes(pair.neg))
    atomic_write_bytes(paths[2], (json.dumps(sidecar, sort_keys=True, indent=2) + "\n").encode())
    return paths


def load_pair(prefix) -> ExcitationPair:
    prefix = str(prefix)
    pos = load_tensor(prefix + ".pos.ptnsr")
    neg = load_tensor(prefix + ".neg.ptnsr")
    try:
        sidecar = json.loads(Path(prefix + ".json").read_text())
    except ValueError as exc:
        raise FormatError(f"pair sidecar is not valid JSON: {exc}") from None
    missing = {"model_hash", "trace_hash", "class_index", "mode"} - set(sidecar)
    if missing:
        raise FormatError(f"pair sidecar is missing {sorted(missing)}")
    return ExcitationPair(pos, neg, int(sidecar["class_index"]),
                          sidecar["model_hash"], sidecar["trace_hash"], sidecar["mode"])
