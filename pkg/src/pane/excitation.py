"""Per-layer sign classification and the local double-chain backward step.

Every affine layer output decomposes into scalar terms t_ij = w_ij*x_j.
Each term lands on the positive chain when its sign agrees with the
layer's pre-bias output o'_i, on the negative chain when it opposes it,
and on neither when the term is exactly zero. The backward step then
cross-routes the incoming coefficient rows:

    u_pos = r_pos @ W_pos + r_neg @ W_neg
    u_neg = r_pos @ W_neg + r_neg @ W_pos

so that agreeing signs compose to positive and opposing signs to
negative. Coefficients on the positive chain can still be negative
reals; the chain label tracks sign agreement with the local output,
not the sign of the coefficient itself.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .model import LayerSpec, _conv_taps, _kernel_rows
from .tensor import F64, Tensor


@dataclass
class ChainState:
    r_pos: Tensor
    r_neg: Tensor

    def __post_init__(self):
        if self.r_pos.shape != self.r_neg.shape:
            raise ShapeError(f"chain halves disagree: {self.r_pos.shape} vs {self.r_neg.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.r_pos.shape


def classify_term(t: float, o_prebias: float) -> int:
    """+1 when the term's sign agrees with o', -1 when it opposes, 0 for zero terms.

    A zero pre-bias output carries no preferred sign; terms are then
    classified by their own sign (positive products stay positive).
    """
    if t == 0.0:
        return 0
    if t > 0.0:
        return 1 if o_prebias >= 0.0 else -1
    return -1 if o_prebias >= 0.0 else 1


def _expect(name: str, got: tuple[int, ...], want: tuple[int, ...]) -> None:
    if got != want:
        raise ShapeError(f"{name} shape {got} does not match layer boundary {want}")


def chain_back_linear(layer: LayerSpec, x: Tensor, o_prebias: Tensor, r: ChainState) -> ChainState:
    out, inf = layer.weight.shape
    _expect("input", x.shape, (inf,))
    _expect("pre-bias output", o_prebias.shape, (out,))
    _expect("chain state", r.shape, (out,))
    data = layer.weight.data
    xs = x.data
    ob = o_prebias.data
    rp = r.r_pos.data
    rn = r.r_neg.data
    up = [0.0] * inf
    un = [0.0] * inf
    for i in range(out):
        p = rp[i]
        n = rn[i]
        if p == 0.0 and n == 0.0:
            continue
        o = ob[i]
        row = data[i * inf:(i + 1) * inf]
        for j in range(inf):
            wv = row[j]
            tv = wv * xs[j]
            if tv == 0.0:
                continue
            if (tv > 0.0) if o >= 0.0 else (tv < 0.0):
                up[j] += p * wv
                un[j] += n * wv
            else:
                up[j] += n * wv
                un[j] += p * wv
    return ChainState(Tensor((inf,), up, F64, checked=False),
                      Tensor((inf,), un, F64, checked=False))


def chain_back_conv(layer: LayerSpec, x: Tensor, o_prebias: Tensor, r: ChainState) -> ChainState:
    if len(x.shape) != 3:
        raise ShapeError(f"conv input must be [C,H,W], got {x.shape}")
    c_in, h, w = x.shape
    c_out, kc_in, kh, kw = layer.kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv kernel expects {kc_in} channels, input has {c_in}")
    oh = (h - kh + 2 * layer.padding) // layer.stride + 1
    ow = (w - kw + 2 * layer.padding) // layer.stride + 1
    _expect("pre-bias output", o_prebias.shape, (c_out, oh, ow))
    _expect("chain state", r.shape, (c_out, oh, ow))
    taps = _conv_taps(h, w, kh, kw, layer.stride, layer.padding)
    npos = len(taps)
    rows = _kernel_rows(layer)
    hw = h * w
    per = kh * kw
    xs = x.data
    ob = o_prebias.data
    rp = r.r_pos.data
    rn = r.r_neg.data
    up = [0.0] * (c_in * hw)
    un = [0.0] * (c_in * hw)
    for co in range(c_out):
        krow = rows[co]
        base = co * npos
        for pos, cell in enumerate(taps):
            p = rp[base + pos]
            n = rn[base + pos]
            if p == 0.0 and n == 0.0:
                continue
            o = ob[base + pos]
            agree = o >= 0.0
            for c in range(c_in):
                cb = c * hw
                roff = c * per
                for ti, t in enumerate(cell):
                    if t < 0:
                        continue
                    wv = krow[roff + ti]
                    tv = wv * xs[cb + t]
                    if tv == 0.0:
                        continue
                    if (tv > 0.0) if agree else (tv < 0.0):
                        up[cb + t] += p * wv
                        un[cb + t] += n * wv
                    else:
                        up[cb + t] += n * wv
                        un[cb + t] += p * wv
    return ChainState(Tensor(x.shape, up, F64, checked=False),
                      Tensor(x.shape, un, F64, checked=False))


def chain_back_relu(x: Tensor, r: ChainState) -> ChainState:
    _expect("chain state", r.shape, x.shape)
    xs = x.data
    up = [rv if xs[i] > 0.0 else 0.0 for i, rv in enumerate(r.r_pos.data)]
    un = [rv if xs[i] > 0.0 else 0.0 for i, rv in enumerate(r.r_neg.data)]
    return ChainState(Tensor(x.shape, up, F64, checked=False),
                      Tensor(x.shape, un, F64, checked=False))


def chain_back_maxpool(layer: LayerSpec, x: Tensor, argmax: list[int], r: ChainState) -> ChainState:
    if len(x.shape) != 3:
        raise ShapeError(f"pool input must be [C,H,W], got {x.shape}")
    if len(argmax) != len(r.r_pos.data):
        raise ShapeError(f"argmax record of {len(argmax)} cells != chain state {r.shape}")
    up = [0.0] * len(x.data)
    un = [0.0] * len(x.data)
    rp = r.r_pos.data
    rn = r.r_neg.data
    for i, src in enumerate(argmax):
        up[src] += rp[i]
        un[src] += rn[i]
    return ChainState(Tensor(x.shape, up, F64, checked=False),
                      Tensor(x.shape, un, F64, checked=False))


def chain_back_avgpool(layer: LayerSpec, x: Tensor, o_prebias: Tensor, r: ChainState) -> ChainState:
    if len(x.shape) != 3:
        raise ShapeError(f"pool input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    kh, kw = layer.window
    stride = layer.stride
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    _expect("pre-bias output", o_prebias.shape, (c, oh, ow))
    _expect("chain state", r.shape, (c, oh, ow))
    inv = 1.0 / (kh * kw)
    xs = x.data
    ob = o_prebias.data
    rp = r.r_pos.data
    rn = r.r_neg.data
    up = [0.0] * len(xs)
    un = [0.0] * len(xs)
    i = 0
    for ch in range(c):
        base = ch * h * w
        for oy in range(oh):
            for ox in range(ow):
                p = rp[i]
                n = rn[i]
                o = ob[i]
                i += 1
                if p == 0.0 and n == 0.0:
                    continue
                agree = o >= 0.0
                start = base + (oy * stride) * w + ox * stride
                for ky in range(kh):
                    row = start + ky * w
                    for kx in range(kw):
                        tv = xs[row + kx] * inv
                        if tv == 0.0:
                            continue
                        if (tv > 0.0) if agree else (tv < 0.0):
                            up[row + kx] += p * inv
                            un[row + kx] += n * inv
                        else:
                            up[row + kx] += n * inv
                            un[row + kx] += p * inv
    return ChainState(Tensor(x.shape, up, F64, checked=False),
                      Tensor(x.shape, un, F64, checked=False))


def chain_back_bn(layer: LayerSpec, x: Tensor, r: ChainState) -> ChainState:
    if len(x.shape) != 3:
        raise ShapeError(f"batchnorm input must be [C,H,W], got {x.shape}")
    _expect("chain state", r.shape, x.shape)
    c, h, w = x.shape
    if layer.gamma.shape != (c,):
        raise ShapeError(f"batchnorm has {layer.gamma.shape[0]} channels, input has {c}")
    scale = layer.bn_scale()
    hw = h * w
    xs = x.data
    rp = r.r_pos.data
    rn = r.r_neg.data
    up = [0.0] * len(xs)
    un = [0.0] * len(xs)
    for ch in range(c):
        s = scale[ch]
        base = ch * hw
        for i in range(base, base + hw):
            # single term per element: a nonzero product always agrees with
            # its own sign, so the coefficient s rides the positive chain
            # even when s is negative
            if s != 0.0 and xs[i] != 0.0:
                up[i] = rp[i] * s
                un[i] = rn[i] * s
    return ChainState(Tensor(x.shape, up, F64, checked=False),
                      Tensor(x.shape, un, F64, checked=False))


def chain_back_flatten(r: ChainState, shape: tuple[int, ...]) -> ChainState:
    return ChainState(r.r_pos.reshape(shape), r.r_neg.reshape(shape))
