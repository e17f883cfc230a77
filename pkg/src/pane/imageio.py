"""Image and heatmap codecs.

Images travel through the toolkit at 0-255 scale as real values in
channel-major ``[C, H, W]`` layout.  Two binary netpbm flavours are
supported (``P5`` grayscale, ``P6`` color, maxval 255) plus the raw
tensor container, which round-trips floats exactly.

Heatmaps render either as min-max normalized grayscale PGM or as a
signed red/blue PPM where positive evidence fills the red channel and
negative evidence the blue channel.
"""

from __future__ import annotations

import math
import os

from .errors import FormatError, NumericError
from .tensor import F64, Tensor, atomic_write_bytes, load_tensor, tensor_from_bytes, zeros

GRAY = "gray"
SIGNED = "signed"

_PNM_MAXVAL = 255


def _read_pnm_tokens(blob: bytes, count: int, start: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated ASCII integers, honoring # comments."""
    tokens: list[int] = []
    i = start
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i] == ord("#"):
            while i < n and blob[i] not in (10, 13):
                i += 1
            continue
        j = i
        while j < n and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated netpbm header")
        token = blob[i:j]
        if not token.isdigit():
            raise FormatError(f"bad netpbm header token {token!r}")
        tokens.append(int(token))
        i = j
    if i >= n or not blob[i : i + 1].isspace():
        raise FormatError("netpbm header not terminated by whitespace")
    return tokens, i + 1


def _decode_pnm(blob: bytes) -> Tensor:
    magic = blob[:2]
    channels = 1 if magic == b"P5" else 3
    (width, height, maxval), offset = _read_pnm_tokens(blob, 3, 2)
    if width <= 0 or height <= 0:
        raise FormatError(f"bad netpbm dimensions {width}x{height}")
    if maxval != _PNM_MAXVAL:
        raise FormatError(f"unsupported netpbm maxval {maxval} (expected {_PNM_MAXVAL})")
    need = width * height * channels
    raster = blob[offset : offset + need]
    if len(raster) != need:
        raise FormatError(f"netpbm raster truncated: expected {need} bytes, found {len(raster)}")
    if len(blob) != offset + need:
        raise FormatError("trailing bytes after netpbm raster")
    # Interleaved rows -> channel-major planes.
    out = zeros((channels, height, width), dtype=F64)
    data = out.data
    plane = height * width
    for idx in range(height * width):
        base = idx * channels
        for c in range(channels):
            data[c * plane + idx] = float(raster[base + c])
    return out


def read_image(path: str) -> Tensor:
    """Load a P5/P6 netpbm file or a raw tensor file as a [C, H, W] tensor."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:6] == b"PTNSR1":
        t = load_tensor(path)
        if len(t.shape) != 3:
            raise FormatError(f"raw image tensor must be rank-3 [C, H, W], got shape {t.shape}")
        return t.astype(F64)
    if head[:2] in (b"P5", b"P6"):
        with open(path, "rb") as fh:
            return _decode_pnm(fh.read())
    if head[:2] in (b"P1", b"P2", b"P3", b"P4"):
        raise FormatError(f"unsupported netpbm variant {head[:2]!r}; only binary P5/P6 are readable")
    raise FormatError(f"unrecognized image format in {os.path.basename(path)!r}")


def _quantize(v: float) -> int:
    q = int(v + 0.5)
    if q < 0:
        return 0
    if q > 255:
        return 255
    return q


def encode_pgm(img: Tensor) -> bytes:
    """Encode a [1, H, W] or [H, W] tensor of 0-255 values as binary PGM."""
    if len(img.shape) == 3:
        if img.shape[0] != 1:
            raise FormatError(f"PGM needs a single channel, got {img.shape[0]}")
        _, h, w = img.shape
    elif len(img.shape) == 2:
        h, w = img.shape
    else:
        raise FormatError(f"PGM encoder needs rank-2 or [1, H, W] input, got shape {img.shape}")
    header = f"P5\n{w} {h}\n{_PNM_MAXVAL}\n".encode("ascii")
    return header + bytes(_quantize(v) for v in img.data)


def encode_ppm(img: Tensor) -> bytes:
    """Encode a [3, H, W] tensor of 0-255 values as binary PPM."""
    if len(img.shape) != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM encoder needs [3, H, W] input, got shape {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n{_PNM_MAXVAL}\n".encode("ascii")
    plane = h * w
    data = img.data
    body = bytearray(3 * plane)
    for idx in range(plane):
        base = idx * 3
        body[base] = _quantize(data[idx])
        body[base + 1] = _quantize(data[plane + idx])
        body[base + 2] = _quantize(data[2 * plane + idx])
    return header + bytes(body)


def write_image(img: Tensor, path: str) -> None:
    """Write a [1, H, W] or [3, H, W] image (0-255 values) as PGM/PPM."""
    if len(img.shape) != 3:
        raise FormatError(f"image writer needs rank-3 [C, H, W] input, got shape {img.shape}")
    blob = encode_pgm(img) if img.shape[0] == 1 else encode_ppm(img)
    atomic_write_bytes(path, blob)


def _check_finite_map(m: Tensor) -> None:
    for v in m.data:
        if not math.isfinite(v):
            raise NumericError("heatmap contains a non-finite value")


def render_gray(m: Tensor) -> bytes:
    """Min-max normalize a rank-2 map into an 8-bit PGM; flat maps render mid-gray."""
    if len(m.shape) != 2:
        raise FormatError(f"heatmap must be rank-2, got shape {m.shape}")
    _check_finite_map(m)
    lo = min(m.data)
    hi = max(m.data)
    h, w = m.shape
    header = f"P5\n{w} {h}\n{_PNM_MAXVAL}\n".encode("ascii")
    if hi == lo:
        # No signal: neutral mid-gray rather than a divide-by-zero artifact.
        return header + bytes([128]) * (h * w)
    span = hi - lo
    return header + bytes(_quantize((v - lo) / span * 255.0) for v in m.data)


def render_signed(m: Tensor) -> bytes:
    """Render a rank-2 signed map: positive -> red, negative -> blue, zero -> black."""
    if len(m.shape) != 2:
        raise FormatError(f"heatmap must be rank-2, got shape {m.shape}")
    _check_finite_map(m)
    peak = max(abs(v) for v in m.data) if m.size else 0.0
    h, w = m.shape
    header = f"P6\n{w} {h}\n{_PNM_MAXVAL}\n".encode("ascii")
    body = bytearray(3 * h * w)
    if peak > 0.0:
        for idx, v in enumerate(m.data):
            if v > 0.0:
                body[idx * 3] = _quantize(v / peak * 255.0)
            elif v < 0.0:
                body[idx * 3 + 2] = _quantize(-v / peak * 255.0)
    return header + bytes(body)


def write_heatmap(m: Tensor, path: str, style: str = GRAY) -> None:
    """Write a rank-2 map as a PGM (gray) or red/blue PPM (signed), atomically."""
    if style == GRAY:
        blob = render_gray(m)
    elif style == SIGNED:
        blob = render_signed(m)
    else:
        raise FormatError(f"unknown heatmap style {style!r}")
    atomic_write_bytes(path, blob)


def decode_image_bytes(blob: bytes) -> Tensor:
    """Decode in-memory PNM or raw tensor bytes (mirror of read_image)."""
    if blob[:6] == b"PTNSR1":
        t = tensor_from_bytes(blob)
        if len(t.shape) != 3:
            raise FormatError(f"raw image tensor must be rank-3 [C, H, W], got shape {t.shape}")
        return t.astype(F64)
    if blob[:2] in (b"P5", b"P6"):
        return _decode_pnm(blob)
    raise FormatError("unrecognized image bytes")
