import random

import pytest

from pane import grad as gd
from pane import model as md
from pane.errors import ShapeError
from pane.selftest import random_input, random_model
from pane.tensor import F64, Tensor


def _t(shape, vals):
    return Tensor(shape, vals, F64)


def _req(graph, x, k=0, **kw):
    trace = md.forward(graph, x, dtype=F64)
    return gd.GradRequest(graph, trace, class_index=k, **kw)


def test_single_linear_grad_is_weight_row():
    graph = md.ModelGraph(
        [md.linear(_t((2, 3), [1, -2, 3, 4, 5, -6]), _t((2,), [0.5, -0.5]))], (3,), 2)
    x = _t((3,), [0.1, 0.2, 0.3])
    assert list(gd.backward_input_grad(_req(graph, x, k=0)).data) == [1.0, -2.0, 3.0]
    assert list(gd.backward_input_grad(_req(graph, x, k=1)).data) == [4.0, 5.0, -6.0]


def test_relu_gates_negative_input():
    graph = md.ModelGraph(
        [md.relu(), md.linear(_t((1, 2), [1.0, 1.0]), _t((1,), [0.0]))], (2,), 1)
    g = gd.backward_input_grad(_req(graph, _t((2,), [-3.0, 2.0])))
    assert list(g.data) == [0.0, 1.0]


def test_relu_gate_is_strict_at_zero():
    graph = md.ModelGraph(
        [md.relu(), md.linear(_t((1, 1), [1.0]), _t((1,), [0.0]))], (1,), 1)
    assert gd.backward_input_grad(_req(graph, _t((1,), [0.0]))).item() == 0.0


def test_guided_equals_plain_without_relu():
    rng = random.Random(11)
    graph = md.ModelGraph(
        [md.conv2d(_t((2, 1, 2, 2), [rng.uniform(-1, 1) for _ in range(8)]),
                   _t((2,), [0.1, -0.2]), 1, 0),
         md.avgpool((2, 2), 1),
         md.flatten(),
         md.linear(_t((2, 8), [rng.uniform(-1, 1) for _ in range(16)]), _t((2,), [0.0, 0.0]))],
        (1, 4, 4), 2)
    x = random_input(rng, graph)
    trace = md.forward(graph, x, dtype=F64)
    plain = gd.backward_input_grad(gd.GradRequest(graph, trace, 1))
    guided = gd.guided_backward(gd.GradRequest(graph, trace, 1, mode=gd.GUIDED))
    assert plain.data.tobytes() == guided.data.tobytes()


def test_guided_clamps_negative_upstream():
    # upstream grad at the relu is -2 but the unit is active (x=5): guided kills it
    graph = md.ModelGraph(
        [md.relu(), md.linear(_t((1, 1), [-2.0]), _t((1,), [0.0]))], (1,), 1)
    x = _t((1,), [5.0])
    assert gd.backward_input_grad(_req(graph, x)).item() == -2.0
    assert gd.guided_backward(_req(graph, x, mode=gd.GUIDED)).item() == 0.0


def test_guided_propagation_nonnegative_at_every_relu():
    rng = random.Random(12)
    for _ in range(20):
        graph = random_model(rng)
        x = random_input(rng, graph)
        trace = md.forward(graph, x, dtype=F64)
        probe = []
        gd.guided_backward(gd.GradRequest(graph, trace, 0, mode=gd.GUIDED), relu_probe=probe)
        for _, vals in probe:
            assert all(v >= 0.0 for v in vals)


def test_guided_mask_subset_of_plain():
    rng = random.Random(13)
    hits = 0
    for _ in range(20):
        graph = random_model(rng)
        x = random_input(rng, graph)
        trace = md.forward(graph, x, dtype=F64)
        plain_probe, guided_probe = [], []
        gd._backward(graph, trace, [1.0] + [0.0] * (graph.class_count - 1),
                     guided=False, relu_probe=plain_probe)
        gd._backward(graph, trace, [1.0] + [0.0] * (graph.class_count - 1),
                     guided=True, relu_probe=guided_probe)
        for (_, pv), (_, gv) in zip(plain_probe, guided_probe):
            hits += 1
            plain_mask = [v != 0.0 for v in pv]
            for i, v in enumerate(gv):
                if v != 0.0:
                    assert plain_mask[i]
    assert hits > 0


def test_maxpool_routes_to_recorded_argmax():
    graph = md.ModelGraph(
        [md.maxpool((2, 2), 2), md.flatten(),
         md.linear(_t((1, 1), [2.0]), _t((1,), [0.0]))], (1, 2, 2), 1)
    g = gd.backward_input_grad(_req(graph, _t((1, 2, 2), [1.0, 4.0, 3.0, 2.0])))
    assert g.tolist() == [[[0.0, 2.0], [0.0, 0.0]]]


def test_linearity_under_weight_scaling():
    rng = random.Random(14)
    base_w = [rng.uniform(-1, 1) for _ in range(8)]
    for alpha in (1.0, 2.0, 4.0):
        graph = md.ModelGraph(
            [md.avgpool((2, 2), 2), md.flatten(),
             md.linear(_t((2, 4), [alpha * v for v in base_w]), _t((2,), [0.0, 0.0]))],
            (1, 4, 4), 2)
        g = gd.backward_input_grad(_req(graph, random_input(rng, graph), k=1))
        if alpha == 1.0:
            ref = list(g.data)
        else:
            assert list(g.data) == [alpha * v for v in ref]


def _well_separated_input(rng, graph, margin=5e-3, tries=80):
    """Resample until no ReLU input or max-pool contest sits within margin of a kink."""
    for _ in range(tries):
        x = random_input(rng, graph)
        trace = md.forward(graph, x, dtype=F64)
        ok = True
        for n, (layer, entry) in enumerate(zip(graph.layers, trace.entries)):
            if layer.kind == md.RELU:
                if any(abs(v) < margin for v in entry.input.data):
                    ok = False
                    break
            elif layer.kind == md.MAXPOOL:
                if not _pool_margins_ok(layer, entry, n, graph, margin):
                    ok = False
                    break
        if ok:
            return x, trace
    return None, None


def _pool_margins_ok(layer, entry, n, graph, margin):
    c, h, w = graph.boundary_shapes[n]
    kh, kw = layer.window
    stride = layer.stride
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    xs = entry.input.data
    i = 0
    for ch in range(c):
        base = ch * h * w
        for oy in range(oh):
            for ox in range(ow):
                start = base + (oy * stride) * w + ox * stride
                vals = sorted(
                    (xs[start + ky * w + kx] for ky in range(kh) for kx in range(kw)),
                    reverse=True)
                i += 1
                if len(vals) > 1 and vals[0] - vals[1] < margin:
                    return False
    return True


def test_plain_grad_matches_finite_differences():
    rng = random.Random(77)
    checked = 0
    while checked < 50:
        graph = random_model(rng)
        x, trace = _well_separated_input(rng, graph)
        if x is None:
            continue
        checked += 1
        k = rng.randrange(graph.class_count)
        an = list(gd.backward_input_grad(gd.GradRequest(graph, trace, k)).data)
        gmax = max(abs(v) for v in an) or 1.0
        h = 1e-4
        vals = list(x.data)
        for i in range(len(vals)):
            hi = list(vals)
            lo = list(vals)
            hi[i] += h
            lo[i] -= h
            fhi = md.logits(md.forward(graph, Tensor(x.shape, hi, F64), dtype=F64)).data[k]
            flo = md.logits(md.forward(graph, Tensor(x.shape, lo, F64), dtype=F64)).data[k]
            fd = (fhi - flo) / (2 * h)
            denom = max(abs(fd), abs(an[i]), 1e-3 * gmax)
            assert abs(fd - an[i]) <= 1e-4 * denom, (
                f"coord {i}: fd={fd} analytic={an[i]}")


def test_feature_grad_identity_head_is_one_hot():
    graph = md.ModelGraph(
        [md.conv2d(_t((2, 1, 1, 1), [3.0, -1.5]), _t((2,), [0.0, 0.0])),
         md.flatten(),
         md.linear(_t((2, 2), [1.0, 0.0, 0.0, 1.0]), _t((2,), [0.0, 0.0]))],
        (1, 1, 1), 2)
    x = _t((1, 1, 1), [2.0])
    for k in (0, 1):
        fg = gd.feature_grad(_req(graph, x, k=k, tap_layer=0))
        assert fg.shape == (2, 1, 1)
        want = [[[1.0]], [[0.0]]] if k == 0 else [[[0.0]], [[1.0]]]
        assert fg.tolist() == want


def test_feature_grad_matches_finite_differences():
    rng = random.Random(78)
    checked = 0
    while checked < 10:
        graph = random_model(rng)
        convs = [i for i, l in enumerate(graph.layers) if l.kind == md.CONV2D]
        if not convs:
            continue
        x, trace = _well_separated_input(rng, graph)
        if x is None:
            continue
        checked += 1
        tap = convs[-1]
        k = rng.randrange(graph.class_count)
        fg = gd.feature_grad(gd.GradRequest(graph, trace, k, tap_layer=tap))
        head = md.ModelGraph(graph.layers[tap + 1:], graph.boundary_shapes[tap + 1],
                             graph.class_count)
        feat = trace.entries[tap].output
        an = list(fg.data)
        gmax = max(abs(v) for v in an) or 1.0
        h = 1e-4
        vals = list(feat.data)
        for i in range(len(vals)):
            hi = list(vals)
            lo = list(vals)
            hi[i] += h
            lo[i] -= h
            fhi = md.logits(md.forward(head, Tensor(feat.shape, hi, F64), dtype=F64)).data[k]
            flo = md.logits(md.forward(head, Tensor(feat.shape, lo, F64), dtype=F64)).data[k]
            fd = (fhi - flo) / (2 * h)
            denom = max(abs(fd), abs(an[i]), 1e-3 * gmax)
            assert abs(fd - an[i]) <= 1e-4 * denom


def test_feature_grad_rejects_non_conv_tap():
    graph = md.ModelGraph(
        [md.conv2d(_t((1, 1, 1, 1), [1.0]), _t((1,), [0.0])), md.relu(), md.flatten()],
        (1, 1, 1), 1)
    x = _t((1, 1, 1), [1.0])
    with pytest.raises(ShapeError):
        gd.feature_grad(_req(graph, x, tap_layer=1))
    with pytest.raises(ShapeError):
        gd.feature_grad(_req(graph, x, tap_layer=7))
    with pytest.raises(ShapeError):
        gd.feature_grad(_req(graph, x))


def test_invalid_class_index():
    graph = md.ModelGraph(
        [md.linear(_t((2, 2), [1, 0, 0, 1]), _t((2,), [0, 0]))], (2,), 2)
    with pytest.raises(ShapeError):
        gd.backward_input_grad(_req(graph, _t((2,), [1.0, 2.0]), k=2))


def test_trace_model_mismatch_rejected():
    g1 = md.ModelGraph([md.linear(_t((1, 1), [1.0]), _t((1,), [0.0]))], (1,), 1)
    g2 = md.ModelGraph([md.linear(_t((1, 1), [2.0]), _t((1,), [0.0]))], (1,), 1)
    trace = md.forward(g1, _t((1,), [1.0]), dtype=F64)
    with pytest.raises(ShapeError):
        gd.backward_input_grad(gd.GradRequest(g2, trace, 0))


def test_backward_from_seed():
    graph = md.ModelGraph(
        [md.linear(_t((2, 2), [1.0, 2.0, 3.0, 4.0]), _t((2,), [0.0, 0.0]))], (2,), 2)
    trace = md.forward(graph, _t((2,), [1.0, 1.0]), dtype=F64)
    g = gd.backward_from_seed(graph, trace, _t((2,), [1.0, -1.0]))
    assert list(g.data) == [1.0 - 3.0, 2.0 - 4.0]
    with pytest.raises(ShapeError):
        gd.backward_from_seed(graph, trace, _t((3,), [1, 0, 0]))
