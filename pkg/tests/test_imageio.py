"""Image and heatmap codec tests."""

import math

import pytest

from pane import imageio as iio
from pane.errors import FormatError, NumericError
from pane.tensor import F32, F64, Tensor, save_tensor


def _pgm_bytes(w, h, raster, maxval=255):
    return f"P5\n{w} {h}\n{maxval}\n".encode() + bytes(raster)


def _ppm_bytes(w, h, raster, maxval=255):
    return f"P6\n{w} {h}\n{maxval}\n".encode() + bytes(raster)


def test_read_pgm_values(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(_pgm_bytes(2, 2, [0, 128, 255, 64]))
    t = iio.read_image(str(p))
    assert t.shape == (1, 2, 2)
    assert list(t.data) == [0.0, 128.0, 255.0, 64.0]
    assert t.dtype == F64


def test_read_ppm_channel_major(tmp_path):
    # One pure-red pixel at (0,0), pure green at (0,1).
    p = tmp_path / "a.ppm"
    p.write_bytes(_ppm_bytes(2, 1, [255, 0, 0, 0, 255, 0]))
    t = iio.read_image(str(p))
    assert t.shape == (3, 1, 2)
    assert t.at(0, 0, 0) == 255.0 and t.at(0, 0, 1) == 0.0
    assert t.at(1, 0, 0) == 0.0 and t.at(1, 0, 1) == 255.0
    assert t.at(2, 0, 0) == 0.0 and t.at(2, 0, 1) == 0.0


def test_ascii_pnm_rejected(tmp_path):
    p = tmp_path / "a.ppm"
    p.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
    with pytest.raises(FormatError):
        iio.read_image(str(p))


def test_header_comments_and_whitespace(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5 # gray\n# full-line comment\n 2\t1 \n255\n" + bytes([7, 9]))
    t = iio.read_image(str(p))
    assert t.shape == (1, 1, 2)
    assert list(t.data) == [7.0, 9.0]


def test_bad_maxval_rejected(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(_pgm_bytes(1, 1, [5], maxval=65535))
    with pytest.raises(FormatError):
        iio.read_image(str(p))


def test_truncated_and_trailing_rasters_rejected(tmp_path):
    short = tmp_path / "short.pgm"
    short.write_bytes(_pgm_bytes(2, 2, [1, 2, 3]))
    with pytest.raises(FormatError):
        iio.read_image(str(short))
    long = tmp_path / "long.pgm"
    long.write_bytes(_pgm_bytes(2, 2, [1, 2, 3, 4, 5]))
    with pytest.raises(FormatError):
        iio.read_image(str(long))


def test_raw_tensor_pass_through(tmp_path):
    t = Tensor((2, 2, 3), [float(i) * 0.5 for i in range(12)], F32)
    p = tmp_path / "img.ptnsr"
    save_tensor(t, str(p))
    back = iio.read_image(str(p))
    assert back.shape == (2, 2, 3)
    assert back.dtype == F64
    assert list(back.data) == list(t.data)


def test_raw_tensor_wrong_rank_rejected(tmp_path):
    p = tmp_path / "img.ptnsr"
    save_tensor(Tensor((4,), [1.0, 2.0, 3.0, 4.0]), str(p))
    with pytest.raises(FormatError):
        iio.read_image(str(p))


def test_unknown_format_rejected(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"\x89PNG\r\n\x1a\n")
    with pytest.raises(FormatError):
        iio.read_image(str(p))


def test_pgm_ppm_encode_roundtrip(tmp_path):
    import random

    rng = random.Random(7)
    gray = Tensor((1, 3, 4), [float(rng.randrange(256)) for _ in range(12)])
    color = Tensor((3, 2, 2), [float(rng.randrange(256)) for _ in range(12)])
    for img, name in ((gray, "g.pgm"), (color, "c.ppm")):
        p = tmp_path / name
        iio.write_image(img, str(p))
        back = iio.read_image(str(p))
        assert back.shape == img.shape
        assert list(back.data) == list(img.data)


def test_render_gray_constant_is_midgray():
    blob = iio.render_gray(Tensor((2, 2), [3.5] * 4))
    assert blob.endswith(bytes([128] * 4))


def test_render_gray_minmax_extremes():
    blob = iio.render_gray(Tensor((1, 3), [0.0, 0.5, 1.0]))
    assert blob.endswith(bytes([0, 128, 255]))  # 0.5 -> 127.5 rounds half-up


def test_render_signed_extremes():
    blob = iio.render_signed(Tensor((1, 3), [-1.0, 0.0, 1.0]))
    assert blob.endswith(bytes([0, 0, 255, 0, 0, 0, 255, 0, 0]))


def test_render_signed_scales_by_peak():
    blob = iio.render_signed(Tensor((1, 2), [2.0, -4.0]))
    assert blob.endswith(bytes([128, 0, 0, 0, 0, 255]))


def test_heatmap_roundtrip_matches_quantized(tmp_path):
    m = Tensor((2, 2), [0.0, 1.0, 2.0, 3.0])
    p = tmp_path / "h.pgm"
    iio.write_heatmap(m, str(p), iio.GRAY)
    back = iio.read_image(str(p))
    assert list(back.data) == [0.0, 85.0, 170.0, 255.0]


def test_heatmap_nonfinite_rejected(tmp_path):
    with pytest.raises(NumericError):
        iio.render_gray(Tensor((1, 2), [0.0, math.inf]))


def test_heatmap_unknown_style(tmp_path):
    with pytest.raises(FormatError):
        iio.write_heatmap(Tensor((1, 1), [0.0]), str(tmp_path / "x.pgm"), "rainbow")


def test_heatmap_requires_rank2():
    with pytest.raises(FormatError):
        iio.render_gray(Tensor((1, 2, 2), [0.0] * 4))


def test_write_failure_leaves_no_file(tmp_path):
    target = tmp_path / "missing-dir" / "h.pgm"
    with pytest.raises(OSError):
        iio.write_heatmap(Tensor((1, 1), [0.0]), str(target))
    assert not target.exists()
