"""Dense row-major float tensors with no third-party math dependency.

Tensors are immutable by convention: nothing in the engine mutates
``data`` after construction, so instances can be shared freely across
threads. 32-bit mode stores values in a C float array (values round to
f32 on store); arithmetic always runs in Python doubles.
"""

from __future__ import annotations

import math
import os
import struct
import sys
import tempfile
from array import array
from operator import add as _add, mul as _mul, sub as _sub
from typing import Iterable, Sequence

from .errors import FormatError, NumericError, ShapeError

F32 = "f32"
F64 = "f64"

_TYPECODE = {F32: "f", F64: "d"}
_DTYPE_CODE = {F32: 0, F64: 1}
_CODE_DTYPE = {0: F32, 1: F64}
_ITEMSIZE = {F32: 4, F64: 8}

_MAGIC = b"PTNSR1"

# Module default for finiteness checking; ops accept an explicit override.
_checked_default = False


def set_checked_default(flag: bool) -> None:
    global _checked_default
    _checked_default = bool(flag)


def checked_default() -> bool:
    return _checked_default


def _prod(extents: Sequence[int]) -> int:
    n = 1
    for e in extents:
        n *= e
    return n


class Tensor:
    """Flat row-major storage plus a shape; strides are derived, not stored."""

    __slots__ = ("shape", "data", "dtype")

    def __init__(
        self,
        shape: Sequence[int],
        data: Iterable[float],
        dtype: str = F64,
        checked: bool | None = None,
    ):
        if dtype not in _TYPECODE:
            raise ValueError(f"unknown dtype {dtype!r}")
        shape = tuple(int(e) for e in shape)
        if any(e < 0 for e in shape):
            raise ShapeError(f"negative extent in shape {shape}")
        buf = data if isinstance(data, array) and data.typecode == _TYPECODE[dtype] else array(_TYPECODE[dtype], data)
        if _prod(shape) != len(buf):
            raise ShapeError(f"shape {shape} holds {_prod(shape)} elements, got {len(buf)}")
        if checked is None:
            checked = _checked_default
        if checked:
            for i, v in enumerate(buf):
                if not math.isfinite(v):
                    raise NumericError(f"non-finite value {v!r} at flat index {i}")
        self.shape = shape
        self.data = buf
        self.dtype = dtype

    @property
    def size(self) -> int:
        return len(self.data)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(int(e) for e in shape)
        if _prod(shape) != len(self.data):
            raise ShapeError(f"cannot reshape {self.shape} ({len(self.data)} elements) to {shape}")
        return Tensor(shape, self.data, self.dtype, checked=False)

    def astype(self, dtype: str) -> "Tensor":
        if dtype == self.dtype:
            return self
        return Tensor(self.shape, self.data, dtype, checked=False)

    def tolist(self) -> list:
        """Nested lists following the shape (flat list for rank 1)."""
        def rec(shape: tuple, flat: list) -> list:
            if len(shape) <= 1:
                return flat
            step = len(flat) // shape[0]
            return [rec(shape[1:], flat[i * step:(i + 1) * step]) for i in range(shape[0])]

        return rec(self.shape, list(self.data))

    def item(self) -> float:
        if len(self.data) != 1:
            raise ShapeError(f"item() on tensor of size {len(self.data)}")
        return self.data[0]

    def flat_index(self, idx: Sequence[int]) -> int:
        if len(idx) != len(self.shape):
            raise ShapeError(f"index rank {len(idx)} != tensor rank {len(self.shape)}")
        flat = 0
        for i, (j, e) in enumerate(zip(idx, self.shape)):
            if not 0 <= j < e:
                raise ShapeError(f"index {idx} out of bounds for shape {self.shape} at axis {i}")
            flat = flat * e + j
        return flat

    def at(self, *idx: int) -> float:
        return self.data[self.flat_index(idx)]

    def __len__(self) -> int:
        return len(self.data)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and self.dtype == other.dtype
            and self.data == other.data
        )

    def __repr__(self) -> str:
        head = ", ".join(f"{v:g}" for v in list(self.data[:6]))
        tail = ", ..." if len(self.data) > 6 else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, data=[{head}{tail}])"

    def __add__(self, other: "Tensor") -> "Tensor":
        return binop(self, other, "add")

    def __sub__(self, other: "Tensor") -> "Tensor":
        return binop(self, other, "sub")

    def __mul__(self, other: "Tensor") -> "Tensor":
        return binop(self, other, "mul")


def zeros(shape: Sequence[int], dtype: str = F64) -> Tensor:
    return Tensor(shape, array(_TYPECODE[dtype], b"\x00" * (_ITEMSIZE[dtype] * _prod(shape))), dtype, checked=False)


_OPS = {"add": _add, "sub": _sub, "mul": _mul}


def binop(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    dtype = F64 if F64 in (a.dtype, b.dtype) else F32
    return Tensor(a.shape, map(_OPS[op], a.data, b.data), dtype, checked=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    return binop(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return binop(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return binop(a, b, "mul")


def tensor_to_bytes(t: Tensor) -> bytes:
    """Raw tensor format: magic, u8 dtype code, u8 rank, rank*u32 extents, payload (all LE)."""
    if len(t.shape) > 255:
        raise FormatError("rank exceeds format limit of 255")
    header = _MAGIC + struct.pack("<BB", _DTYPE_CODE[t.dtype], len(t.shape))
    header += struct.pack(f"<{len(t.shape)}I", *t.shape)
    payload = t.data if sys.byteorder == "little" else _byteswapped(t.data)
    return header + payload.tobytes()


def tensor_from_bytes(data: bytes, checked: bool | None = None) -> Tensor:
    if data[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"bad tensor magic {data[:len(_MAGIC)]!r}")
    off = len(_MAGIC)
    if len(data) < off + 2:
        raise FormatError(f"truncated tensor header at byte {len(data)}")
    code, rank = struct.unpack_from("<BB", data, off)
    off += 2
    if code not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPE[code]
    if len(data) < off + 4 * rank:
        raise FormatError(f"truncated extent list at byte {len(data)}")
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    expected = _prod(shape) * _ITEMSIZE[dtype]
    if len(data) - off != expected:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {expected}")
    buf = array(_TYPECODE[dtype])
    buf.frombytes(data[off:])
    if sys.byteorder != "little":
        buf.byteswap()
    return Tensor(shape, buf, dtype, checked=checked)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a same-directory temp file and rename; readers never see partial files."""
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_tensor(t: Tensor, path) -> None:
    atomic_write_bytes(path, tensor_to_bytes(t))


def load_tensor(path, checked: bool | None = None) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), checked=checked)


def _byteswapped(buf: array) -> array:
    out = array(buf.typecode, buf)
    out.byteswap()
    return out
