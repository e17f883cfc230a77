"""Random small-model generation and quick engine self-checks.

The generator is shared by the test suite and the ``selftest`` CLI
command. Models stay tiny on purpose: every boundary is small enough
for the dense reference route to materialize its full coefficient
matrices.
"""

from __future__ import annotations

import random
import struct

from . import model as md
from .tensor import F64, Tensor


def _f32(v: float) -> float:
    """Round to the nearest 32-bit float so values survive a save/load cycle."""
    return struct.unpack("<f", struct.pack("<f", v))[0]


def _rand_tensor(rng: random.Random, shape: tuple[int, ...], lo: float = -1.0, hi: float = 1.0) -> Tensor:
    n = 1
    for e in shape:
        n *= e
    return Tensor(shape, [_f32(rng.uniform(lo, hi)) for _ in range(n)], F64)


def random_model(rng: random.Random, max_body_layers: int = 4, name: str = "rand") -> md.ModelGraph:
    """A small valid net: optional conv/pool/norm body, then flatten + linear head."""
    c = rng.choice([1, 2, 3])
    h = rng.randint(4, 8)
    w = rng.randint(4, 8)
    input_shape = (c, h, w)
    layers: list[md.LayerSpec] = []
    ch, hh, ww = c, h, w
    for _ in range(rng.randint(1, max_body_layers)):
        choices = ["relu"]
        if min(hh, ww) >= 2:
            choices += ["conv", "conv", "pool"]
        if rng.random() < 0.5:
            choices.append("bn")
        pick = rng.choice(choices)
        if pick == "conv":
            k = rng.randint(1, min(3, hh, ww))
            stride = rng.choice([1, 1, 2])
            padding = rng.choice([0, 1]) if k > 1 else 0
            c_out = rng.randint(1, 4)
            if (hh - k + 2 * padding) // stride + 1 < 1 or (ww - k + 2 * padding) // stride + 1 < 1:
                continue
            layers.append(md.conv2d(_rand_tensor(rng, (c_out, ch, k, k)),
                                    _rand_tensor(rng, (c_out,)), stride, padding))
            ch = c_out
            hh = (hh - k + 2 * padding) // stride + 1
            ww = (ww - k + 2 * padding) // stride + 1
        elif pick == "pool":
            kh = rng.choice([1, 2]) if hh >= 2 else 1
            kw = rng.choice([1, 2]) if ww >= 2 else 1
            if kh == 1 and kw == 1:
                kh = 2 if hh >= 2 else 1
            stride = rng.choice([1, 2])
            if (hh - kh) // stride + 1 < 1 or (ww - kw) // stride + 1 < 1:
                continue
            make = md.maxpool if rng.random() < 0.5 else md.avgpool
            layers.append(make((kh, kw), stride))
            hh = (hh - kh) // stride + 1
            ww = (ww - kw) // stride + 1
        elif pick == "bn":
            # negative scale entries exercise sign handling in the shift rule
            gamma = Tensor((ch,), [_f32(rng.uniform(-1.5, 1.5)) for _ in range(ch)], F64)
            var = Tensor((ch,), [_f32(rng.uniform(0.0, 2.0)) for _ in range(ch)], F64)
            layers.append(md.batchnorm(gamma, _rand_tensor(rng, (ch,)), _rand_tensor(rng, (ch,)),
                                       var, eps=_f32(rng.uniform(1e-3, 0.5))))
        else:
            layers.append(md.relu())
    layers.append(md.flatten())
    feat = ch * hh * ww
    classes = rng.choice([2, 3])
    if rng.random() < 0.4:
        hidden = rng.randint(2, 6)
        layers.append(md.linear(_rand_tensor(rng, (hidden, feat)), _rand_tensor(rng, (hidden,))))
        layers.append(md.relu())
        feat = hidden
    layers.append(md.linear(_rand_tensor(rng, (classes, feat)), _rand_tensor(rng, (classes,))))
    return md.ModelGraph(layers, input_shape, classes, name=name)


def random_input(rng: random.Random, graph: md.ModelGraph, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    n = 1
    for e in graph.input_shape:
        n *= e
    return Tensor(graph.input_shape, [rng.uniform(lo, hi) for _ in range(n)], F64)


# --------------------------------------------------------------------------
# Quick engine self-checks (the `selftest` CLI command)
# --------------------------------------------------------------------------


def _single_layer_case(rng: random.Random, kind: str):
    """One random layer of the given kind plus a matching random input."""
    c = rng.choice([1, 2, 3])
    h = rng.randint(2, 6)
    w = rng.randint(2, 6)
    if kind == md.LINEAR:
        n_in = rng.randint(2, 10)
        n_out = rng.randint(1, 5)
        layer = md.linear(_rand_tensor(rng, (n_out, n_in)), _rand_tensor(rng, (n_out,)))
        shape = (n_in,)
    elif kind == md.CONV2D:
        k = rng.randint(1, min(3, h, w))
        c_out = rng.randint(1, 3)
        layer = md.conv2d(_rand_tensor(rng, (c_out, c, k, k)), _rand_tensor(rng, (c_out,)),
                          stride=rng.choice([1, 2]), padding=rng.choice([0, 1]) if k > 1 else 0)
        shape = (c, h, w)
    elif kind == md.RELU:
        layer, shape = md.relu(), (c, h, w)
    elif kind == md.MAXPOOL:
        layer, shape = md.maxpool((min(2, h), min(2, w)), rng.choice([1, 2])), (c, h, w)
    elif kind == md.AVGPOOL:
        layer, shape = md.avgpool((min(2, h), min(2, w)), rng.choice([1, 2])), (c, h, w)
    elif kind == md.BATCHNORM:
        gamma = Tensor((c,), [_f32(rng.uniform(-1.5, 1.5)) for _ in range(c)], F64)
        var = Tensor((c,), [_f32(rng.uniform(0.0, 2.0)) for _ in range(c)], F64)
        layer = md.batchnorm(gamma, _rand_tensor(rng, (c,)), _rand_tensor(rng, (c,)),
                             var, eps=_f32(rng.uniform(1e-3, 0.5)))
        shape = (c, h, w)
    else:
        layer, shape = md.flatten(), (c, h, w)
    n = 1
    for e in shape:
        n *= e
    x = Tensor(shape, [rng.uniform(-1.0, 1.0) for _ in range(n)], F64)
    return layer, x


def _wrap_layer(layer: md.LayerSpec, x: Tensor) -> tuple[md.ModelGraph, md.ForwardTrace]:
    """Embed one layer in a minimal valid graph and run it on x."""
    out_shape = md.layer_output_shape(layer, x.shape)
    if layer.kind == md.LINEAR:
        graph = md.ModelGraph([layer], x.shape, out_shape[0])
    else:
        feat = 1
        for e in out_shape:
            feat *= e
        head = md.linear(Tensor((1, feat), [0.0] * feat), Tensor((1,), [0.0]), "head")
        tail = [head] if len(out_shape) == 1 else [md.flatten(), head]
        graph = md.ModelGraph([layer] + tail, x.shape, 1)
    return graph, md.forward(graph, x, dtype=F64)


def _check_local_completeness(rng: random.Random, per_kind: int):
    """Pos-term sum + neg-term sum equals the pre-bias output elementwise."""
    from . import chain as chm
    from . import excitation as exm

    worst = 0.0
    kinds = (md.LINEAR, md.CONV2D, md.RELU, md.MAXPOOL, md.AVGPOOL, md.BATCHNORM, md.FLATTEN)
    for kind in kinds:
        for _ in range(per_kind):
            layer, x = _single_layer_case(rng, kind)
            graph, trace = _wrap_layer(layer, x)
            prebias = trace.entries[0].prebias
            m = prebias.size
            for i in range(m):
                seed = exm.ChainState(
                    Tensor(prebias.shape, [1.0 if j == i else 0.0 for j in range(m)], F64),
                    Tensor(prebias.shape, [0.0] * m, F64),
                )
                state = chm._chain_step(graph, trace, 0, seed)
                pos = sum(cv * xv for cv, xv in zip(state.r_pos.data, x.data))
                neg = sum(cv * xv for cv, xv in zip(state.r_neg.data, x.data))
                gross = sum(
                    abs(pv * xv) + abs(nv * xv)
                    for pv, nv, xv in zip(state.r_pos.data, state.r_neg.data, x.data)
                )
                want = prebias.data[i]
                worst = max(worst, abs((pos + neg) - want) / max(abs(want), gross, 1e-12))
    return worst


def _check_chain_purity(rng: random.Random, per_kind: int) -> bool:
    """Single-term layers never move mass across chains; ReLU's negative block is zero."""
    from . import chain as chm
    from . import excitation as exm

    for kind in (md.RELU, md.MAXPOOL, md.BATCHNORM):
        for _ in range(per_kind):
            layer, x = _single_layer_case(rng, kind)
            graph, trace = _wrap_layer(layer, x)
            shape = trace.entries[0].prebias.shape
            m = trace.entries[0].prebias.size
            r = Tensor(shape, [rng.uniform(-1.0, 1.0) for _ in range(m)], F64)
            zero = Tensor(shape, [0.0] * m, F64)
            only_pos = chm._chain_step(graph, trace, 0, exm.ChainState(r, zero))
            only_neg = chm._chain_step(graph, trace, 0, exm.ChainState(zero, r))
            if any(v != 0.0 for v in only_pos.r_neg.data):
                return False
            if any(v != 0.0 for v in only_neg.r_pos.data):
                return False
    return True


def _strip_biases(graph: md.ModelGraph) -> md.ModelGraph:
    """Clone with every bias/shift removed (batchnorm keeps only its scale)."""
    layers = []
    for l in graph.layers:
        if l.kind == md.LINEAR:
            layers.append(md.linear(l.weight, Tensor(l.bias.shape, [0.0] * l.bias.size, F64), l.name))
        elif l.kind == md.CONV2D:
            layers.append(md.conv2d(l.kernel, Tensor(l.bias.shape, [0.0] * l.bias.size, F64),
                                    l.stride, l.padding, l.name))
        elif l.kind == md.BATCHNORM:
            scale = l.bn_scale()
            c = len(scale)
            zeroes = Tensor((c,), [0.0] * c, F64)
            # gamma = w', var = 0, eps = 1 keeps the scale, zeroes the shift
            layers.append(md.batchnorm(Tensor((c,), list(scale), F64), zeroes, zeroes, zeroes,
                                       eps=1.0, name=l.name))
        else:
            layers.append(l)
    return md.ModelGraph(layers, graph.input_shape, graph.class_count, name=graph.name)


def run_selftest(models: int = 5, seed: int = 20240501, emit=print) -> bool:
    """Quick oracle/identity suite; prints one PASS/FAIL line per check."""
    from . import chain as chm

    rng = random.Random(seed)
    ok = True

    def report(name: str, good: bool, detail: str) -> None:
        nonlocal ok
        ok = ok and good
        emit(f"[{'PASS' if good else 'FAIL'}] {name}: {detail}")

    worst = _check_local_completeness(rng, per_kind=25)
    report("local-completeness", worst <= 1e-9,
           f"max relative error {worst:.3e} over 25 instances x 7 layer kinds (bound 1e-9)")

    report("chain-purity", _check_chain_purity(rng, per_kind=25),
           "single-term layers kept every coefficient on its own chain")

    worst_pair = 0.0
    for i in range(models):
        graph = random_model(rng, name=f"selftest_{i}")
        x = random_input(rng, graph)
        trace = md.forward(graph, x, dtype=F64)
        k = rng.randrange(graph.class_count)
        fast = chm.pane_explain(graph, trace, k)
        slow = chm.dense_oracle(graph, trace, k)
        gmax = max(
            1e-12,
            max(abs(v) for v in fast.pos.data + fast.neg.data + slow.pos.data + slow.neg.data),
        )
        for a, b in ((fast.pos, slow.pos), (fast.neg, slow.neg)):
            for va, vb in zip(a.data, b.data):
                worst_pair = max(worst_pair, abs(va - vb) / max(abs(va), abs(vb), gmax))
    report("oracle-equivalence", worst_pair <= 1e-9,
           f"max relative error {worst_pair:.3e} over {models} random models (bound 1e-9)")

    worst_rec = 0.0
    for i in range(models):
        graph = _strip_biases(random_model(rng, name=f"recon_{i}"))
        x = random_input(rng, graph)
        trace = md.forward(graph, x, dtype=F64)
        k = rng.randrange(graph.class_count)
        pair = chm.pane_explain(graph, trace, k)
        got = sum((p + n) * xv for p, n, xv in zip(pair.pos.data, pair.neg.data, x.data))
        want = md.logits(trace).data[k]
        gross = sum((abs(p) + abs(n)) * abs(xv) for p, n, xv in zip(pair.pos.data, pair.neg.data, x.data))
        worst_rec = max(worst_rec, abs(got - want) / max(abs(want), gross, 1e-12))
    report("bias-free-reconstruction", worst_rec <= 1e-6,
           f"max relative error {worst_rec:.3e} over {models} bias-free models (bound 1e-6)")

    rt_ok = True
    for i in range(3):
        graph = random_model(rng, name=f"roundtrip_{i}")
        blob = md.save_model(graph)
        again = md.save_model(md.load_model(blob))
        rt_ok = rt_ok and blob == again
    report("weights-round-trip", rt_ok, "save -> load -> save is byte-identical for 3 models")

    return ok


def fixture_reconstruction_check(graph: md.ModelGraph, seed: int = 7, emit=print) -> bool:
    """Bias-free reconstruction identity on a user-supplied model."""
    from . import chain as chm

    rng = random.Random(seed)
    stripped = _strip_biases(graph)
    x = random_input(rng, stripped, lo=0.0, hi=255.0)
    trace = md.forward(stripped, x, dtype=F64)
    k = rng.randrange(stripped.class_count)
    pair = chm.pane_explain(stripped, trace, k)
    got = sum((p + n) * xv for p, n, xv in zip(pair.pos.data, pair.neg.data, x.data))
    want = md.logits(trace).data[k]
    gross = sum((abs(p) + abs(n)) * abs(xv) for p, n, xv in zip(pair.pos.data, pair.neg.data, x.data))
    err = abs(got - want) / max(abs(want), gross, 1e-12)
    good = err <= 1e-6
    emit(f"[{'PASS' if good else 'FAIL'}] model-reconstruction: relative error {err:.3e} "
         f"for class {k} (bound 1e-6)")
    return good
