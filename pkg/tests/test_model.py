import math
import random

import pytest

from pane import model as md
from pane.errors import FormatError, NumericError, ShapeError
from pane.selftest import random_input, random_model
from pane.tensor import F32, F64, Tensor


def _t(shape, vals):
    return Tensor(shape, vals, F64)


def scalar_conv_model(k=2.0, bias=0.0):
    layers = [md.conv2d(_t((1, 1, 1, 1), [k]), _t((1,), [bias])), md.flatten()]
    return md.ModelGraph(layers, (1, 1, 1), 1)


def test_scalar_conv():
    trace = md.forward(scalar_conv_model(), _t((1, 1, 1), [3.0]), dtype=F64)
    conv = trace.entries[0]
    assert conv.output.tolist() == [[[6.0]]]
    assert conv.prebias.tolist() == [[[6.0]]]


def test_linear_example():
    graph = md.ModelGraph(
        [md.linear(_t((1, 2), [3.0, 1.0]), _t((1,), [1.0]))], (2,), 1)
    trace = md.forward(graph, _t((2,), [1.0, -2.0]), dtype=F64)
    assert list(trace.entries[0].prebias.data) == [1.0]
    assert list(trace.entries[0].output.data) == [2.0]
    assert list(md.logits(trace).data) == [2.0]


def test_maxpool_argmax():
    graph = md.ModelGraph(
        [md.maxpool((2, 2), 2), md.flatten()], (1, 2, 2), 1)
    trace = md.forward(graph, _t((1, 2, 2), [1.0, 4.0, 3.0, 2.0]), dtype=F64)
    pool = trace.entries[0]
    assert pool.output.tolist() == [[[4.0]]]
    assert pool.argmax == [1]   # flat index of row 0, col 1


def test_maxpool_tie_takes_first_row_major():
    graph = md.ModelGraph([md.maxpool((2, 2), 2), md.flatten()], (1, 2, 2), 1)
    trace = md.forward(graph, _t((1, 2, 2), [5.0, 5.0, 5.0, 5.0]), dtype=F64)
    assert trace.entries[0].argmax == [0]


def test_avgpool_window_mean():
    graph = md.ModelGraph([md.avgpool((2, 2), 2), md.flatten()], (1, 2, 2), 1)
    trace = md.forward(graph, _t((1, 2, 2), [2.0, -1.0, 1.0, 0.0]), dtype=F64)
    assert trace.entries[0].output.item() == pytest.approx(0.5, abs=0.0)


def test_batchnorm_scale_shift():
    # scale 2/(sqrt(0)+1) = 2, shift 0
    graph = md.ModelGraph(
        [md.batchnorm(_t((1,), [2.0]), _t((1,), [0.0]), _t((1,), [0.0]), _t((1,), [0.0]), eps=1.0),
         md.flatten()],
        (1, 1, 1), 1)
    trace = md.forward(graph, _t((1, 1, 1), [3.0]), dtype=F64)
    assert trace.entries[0].prebias.item() == 6.0
    assert trace.entries[0].output.item() == 6.0


def test_relu_clamps():
    graph = md.ModelGraph([md.flatten(), md.relu()], (1, 1, 3), 3)
    trace = md.forward(graph, _t((1, 1, 3), [-1.0, 0.0, 2.5]), dtype=F64)
    assert list(trace.entries[1].output.data) == [0.0, 0.0, 2.5]


def test_empty_model_is_identity():
    graph = md.ModelGraph([], (2,), 2)
    x = _t((2,), [0.25, -0.75])
    trace = md.forward(graph, x, dtype=F64)
    assert md.logits(trace).data.tobytes() == x.data.tobytes()


def test_forward_shape_mismatch():
    graph = scalar_conv_model()
    with pytest.raises(ShapeError):
        md.forward(graph, _t((1, 2, 2), [1, 2, 3, 4]), dtype=F64)


def test_constructor_validation():
    with pytest.raises(ShapeError):
        md.linear(_t((2, 2), [1, 2, 3, 4]), _t((1,), [0.0]))
    with pytest.raises(ShapeError):
        md.conv2d(_t((1, 1, 2, 2), [1, 2, 3, 4]), _t((2,), [0.0, 0.0]))
    with pytest.raises(ShapeError):
        md.conv2d(_t((1, 1, 1, 1), [1.0]), _t((1,), [0.0]), stride=0)
    with pytest.raises(ShapeError):
        md.maxpool((0, 2), 1)
    with pytest.raises(ShapeError):
        md.batchnorm(_t((2,), [1, 1]), _t((2,), [0, 0]), _t((2,), [0, 0]), _t((2,), [1, 1]), eps=0.0)
    with pytest.raises(ShapeError):
        md.batchnorm(_t((1,), [1]), _t((1,), [0]), _t((1,), [0]), _t((1,), [-0.5]), eps=1e-5)


def test_graph_chain_validation():
    # linear directly on a rank-3 boundary must be rejected
    with pytest.raises(ShapeError):
        md.ModelGraph(
            [md.linear(_t((1, 4), [1, 1, 1, 1]), _t((1,), [0.0]))], (1, 2, 2), 1)
    # pool window larger than the input
    with pytest.raises(ShapeError):
        md.ModelGraph([md.maxpool((3, 3), 1), md.flatten()], (1, 2, 2), 4)
    # final boundary must equal the logit vector
    with pytest.raises(ShapeError):
        md.ModelGraph([md.flatten()], (1, 2, 2), 3)


def test_trace_identity_exact_in_f64():
    rng = random.Random(42)
    for _ in range(30):
        graph = random_model(rng)
        trace = md.forward(graph, random_input(rng, graph), dtype=F64)
        for layer, entry in zip(graph.layers, trace.entries):
            if layer.kind == md.LINEAR:
                bias = list(layer.bias.data)
            elif layer.kind == md.CONV2D:
                npos = entry.output.shape[1] * entry.output.shape[2]
                bias = [b for b in layer.bias.data for _ in range(npos)]
            elif layer.kind == md.BATCHNORM:
                hw = entry.output.shape[1] * entry.output.shape[2]
                bias = [b for b in layer.bn_shift() for _ in range(hw)]
            else:
                assert entry.prebias.data.tobytes() == entry.output.data.tobytes()
                continue
            for o, y, b in zip(entry.output.data, entry.prebias.data, bias):
                assert o == y + b


def _conv_reference(kernel, bias, stride, padding, x, in_shape):
    """Independent route: explicit dense linearized matrix, then matvec."""
    c_in, h, w = in_shape
    c_out, _, kh, kw = kernel.shape
    oh = (h - kh + 2 * padding) // stride + 1
    ow = (w - kw + 2 * padding) // stride + 1
    n_in = c_in * h * w
    out = []
    for co in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                row = [0.0] * n_in
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride - padding + ky
                            ix = ox * stride - padding + kx
                            if 0 <= iy < h and 0 <= ix < w:
                                row[ci * h * w + iy * w + ix] += kernel.at(co, ci, ky, kx)
                out.append(sum(r * v for r, v in zip(row, x)) + bias.data[co])
    return out, (c_out, oh, ow)


def test_conv_matches_linearized_form():
    rng = random.Random(99)
    for _ in range(100):
        c_in = rng.randint(1, 3)
        c_out = rng.randint(1, 3)
        h = rng.randint(2, 6)
        w = rng.randint(2, 6)
        k = rng.randint(1, min(3, h, w))
        stride = rng.choice([1, 2])
        padding = rng.choice([0, 1]) if k > 1 else 0
        if (h - k + 2 * padding) // stride + 1 < 1 or (w - k + 2 * padding) // stride + 1 < 1:
            continue
        kernel = _t((c_out, c_in, k, k), [rng.uniform(-1, 1) for _ in range(c_out * c_in * k * k)])
        bias = _t((c_out,), [rng.uniform(-1, 1) for _ in range(c_out)])
        graph = md.ModelGraph(
            [md.conv2d(kernel, bias, stride, padding), md.flatten()],
            (c_in, h, w),
            c_out * ((h - k + 2 * padding) // stride + 1) * ((w - k + 2 * padding) // stride + 1))
        x = random_input(rng, graph)
        got = list(md.forward(graph, x, dtype=F64).entries[0].output.data)
        want, _ = _conv_reference(kernel, bias, stride, padding, list(x.data), (c_in, h, w))
        assert len(got) == len(want)
        for g, v in zip(got, want):
            assert abs(g - v) <= 1e-9 * max(abs(g), abs(v), 1e-12)


def test_shape_chain_fuzz():
    rng = random.Random(2024)
    for _ in range(200):
        graph = random_model(rng)
        trace = md.forward(graph, random_input(rng, graph), dtype=F64)
        for entry, shape in zip(trace.entries, graph.boundary_shapes[1:]):
            assert entry.output.shape == shape
        assert md.logits(trace).shape == (graph.class_count,)


def test_forward_determinism():
    rng = random.Random(5)
    graph = random_model(rng)
    x = random_input(rng, graph)
    t1 = md.forward(graph, x, dtype=F64)
    t2 = md.forward(graph, x, dtype=F64)
    assert t1.hash == t2.hash
    for a, b in zip(t1.entries, t2.entries):
        assert a.output.data.tobytes() == b.output.data.tobytes()
        assert a.prebias.data.tobytes() == b.prebias.data.tobytes()


def test_float_mode_env(monkeypatch):
    graph = scalar_conv_model()
    x = _t((1, 1, 1), [3.0])
    monkeypatch.setenv("PANE_FLOAT_MODE", "f32")
    assert md.forward(graph, x).entries[0].output.dtype == F32
    monkeypatch.setenv("PANE_FLOAT_MODE", "f64")
    assert md.forward(graph, x).entries[0].output.dtype == F64
    monkeypatch.setenv("PANE_FLOAT_MODE", "f16")
    with pytest.raises(ValueError):
        md.forward(graph, x)


def test_checked_forward_rejects_nonfinite():
    graph = md.ModelGraph(
        [md.linear(_t((1, 1), [1e308]), _t((1,), [0.0])),
         md.relu(),
         md.linear(_t((1, 1), [1e308]), _t((1,), [0.0]))],
        (1,), 1)
    with pytest.raises(NumericError):
        md.forward(graph, _t((1,), [1e308]), dtype=F64, checked=True)


def test_softmax():
    assert list(md.softmax(_t((2,), [0.0, 0.0])).data) == [0.5, 0.5]
    big = md.softmax(_t((2,), [1000.0, 0.0]))
    assert big.data[0] == pytest.approx(1.0, abs=1e-12)
    assert big.data[1] == pytest.approx(0.0, abs=1e-12)
    closed = md.softmax(_t((2,), [math.log(2.0), 0.0]))
    assert closed.data[0] == pytest.approx(2.0 / 3.0, rel=1e-15)
    assert closed.data[1] == pytest.approx(1.0 / 3.0, rel=1e-15)
    rng = random.Random(0)
    for _ in range(50):
        n = rng.randint(2, 10)
        p = md.softmax(_t((n,), [rng.uniform(-30, 30) for _ in range(n)]))
        assert abs(sum(p.data) - 1.0) <= 1e-12
    with pytest.raises(NumericError):
        md.softmax(Tensor((1,), [float("nan")], F64, checked=False))


def test_save_load_round_trip(tmp_path):
    rng = random.Random(31)
    for _ in range(20):
        graph = random_model(rng)
        blob = md.save_model(graph)
        back = md.load_model(blob)
        assert md.save_model(back) == blob
        assert back.hash == graph.hash
        assert back.input_shape == graph.input_shape
        assert back.class_count == graph.class_count
        assert [l.kind for l in back.layers] == [l.kind for l in graph.layers]
        x = random_input(rng, graph)
        t1 = md.forward(graph, x, dtype=F64)
        t2 = md.forward(back, x, dtype=F64)
        assert md.logits(t1).data.tobytes() == md.logits(t2).data.tobytes()
    path = tmp_path / "m.panew"
    md.save_model_file(graph, path)
    assert md.load_model_file(path).hash == graph.hash


def test_load_rejects_corruption():
    rng = random.Random(8)
    blob = md.save_model(random_model(rng))
    with pytest.raises(FormatError):
        md.load_model(b"WRONGMAG" + blob[8:])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(FormatError):
        md.load_model(bytes(flipped))
    with pytest.raises(FormatError) as exc:
        md.load_model(blob[: len(blob) // 2])
    assert "CRC" in str(exc.value) or "truncated" in str(exc.value)
    with pytest.raises(FormatError):
        md.load_model(b"")


def test_load_rejects_unknown_layer_code():
    rng = random.Random(9)
    graph = random_model(rng)
    blob = bytearray(md.save_model(graph))
    # first layer kind code sits right after magic + layer count
    import struct as st
    import zlib
    blob[12] = 99
    body = bytes(blob[:-4])
    patched = body + st.pack("<I", zlib.crc32(body))
    with pytest.raises(FormatError) as exc:
        md.load_model(patched)
    assert "kind code" in str(exc.value)


def test_load_rejects_metadata_chain_mismatch():
    import json
    import struct as st
    import zlib
    graph = md.ModelGraph(
        [md.linear(_t((2, 3), [1, 0, 0, 0, 1, 0]), _t((2,), [0.0, 0.0]))], (3,), 2)
    blob = md.save_model(graph)
    meta = dict(graph.meta)
    meta["class_count"] = 5
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = blob[: -8 - len(graph.meta_raw)] + st.pack("<I", len(raw)) + raw
    patched = body + st.pack("<I", zlib.crc32(body))
    with pytest.raises(ShapeError):
        md.load_model(patched)


def test_metadata_missing_fields():
    import struct as st
    import zlib
    body = md.MAGIC + st.pack("<I", 0) + st.pack("<I", 2) + b"{}"
    patched = body + st.pack("<I", zlib.crc32(body))
    with pytest.raises(FormatError):
        md.load_model(patched)
