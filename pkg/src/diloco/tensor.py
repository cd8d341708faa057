"""Flat FP32 parameter vectors with a named-segment layout, the binary16
codec used for reduced-precision all-reduce, and the binary wire/checkpoint
encoding shared by every module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


Layout = tuple  # tuple[Segment, ...]


def make_layout(sizes: Iterable[tuple[str, int]]) -> Layout:
    """Build a contiguous layout from ``(name, length)`` pairs."""
    segs = []
    offset = 0
    for name, length in sizes:
        segs.append(Segment(str(name), offset, int(length)))
        offset += int(length)
    return tuple(segs)


def layout_size(layout: Layout) -> int:
    return sum(s.length for s in layout)


def check_layout(layout: Layout, n: int) -> None:
    offset = 0
    for seg in layout:
        if seg.length < 0 or seg.offset != offset:
            raise ShapeError(f"segment {seg.name!r} is not contiguous at offset {offset}")
        offset += seg.length
    if offset != n:
        raise ShapeError(f"layout covers {offset} scalars but data has {n}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class ParamVector:
    """Immutable flat FP32 vector. Equality is bitwise and includes the layout."""

    __slots__ = ("data", "layout")

    def __init__(self, data, layout: Layout):
        arr = np.array(data, dtype=np.float32, copy=True).reshape(-1)
        layout = tuple(layout)
        check_layout(layout, arr.size)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "layout", layout)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    @classmethod
    def from_segments(cls, parts: Mapping[str, np.ndarray]) -> "ParamVector":
        arrays = [np.asarray(a, dtype=np.float32).reshape(-1) for a in parts.values()]
        layout = make_layout((name, a.size) for name, a in zip(parts, arrays))
        data = np.concatenate(arrays) if arrays else np.zeros(0, np.float32)
        return cls(data, layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout), np.float32), layout)

    def __len__(self) -> int:
        return self.data.size

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.data[seg.offset:seg.offset + seg.length]
        raise KeyError(name)

    def with_data(self, data) -> "ParamVector":
        return ParamVector(data, self.layout)

    def copy_data(self) -> np.ndarray:
        return self.data.copy()

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32))

    def __hash__(self):
        return hash((self.layout, self.data.tobytes()))

    def __repr__(self):
        names = ",".join(s.name for s in self.layout)
        return f"ParamVector(n={len(self)}, segments=[{names}])"


def require_same_layout(a, b) -> None:
    if a.layout != b.layout:
        raise ShapeError("layout mismatch")


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``y + alpha * x`` in FP32."""
    require_same_layout(x, y)
    return ParamVector(y.data + np.float32(alpha) * x.data, y.layout)


@dataclass(frozen=True)
class Fp16Buffer:
    bits: np.ndarray
    overflow: bool = False

    @property
    def length(self) -> int:
        return int(self.bits.size)


def encode_fp16(v) -> Fp16Buffer:
    """Round each FP32 scalar to binary16 (nearest-even).

    Finite values beyond the binary16 range become infinities and set
    ``overflow``; they are never saturated.
    """
    data = v.data if isinstance(v, ParamVector) else np.ascontiguousarray(v, dtype=np.float32)
    bits, n_over = kernels.f32_to_f16(np.ascontiguousarray(data, dtype=np.float32))
    return Fp16Buffer(_frozen(np.asarray(bits, dtype=np.uint16)), n_over > 0)


def decode_fp16(b: Fp16Buffer, layout: Layout) -> ParamVector:
    if b.length != layout_size(layout):
        raise ShapeError(f"fp16 buffer has {b.length} codes, layout expects {layout_size(layout)}")
    return ParamVector(kernels.f16_to_f32(np.ascontiguousarray(b.bits)), layout)


def round_fp16(x: np.ndarray) -> np.ndarray:
    """FP32 array rounded through binary16 and widened back."""
    bits, _ = kernels.f32_to_f16(np.ascontiguousarray(x, dtype=np.float32))
    return np.asarray(kernels.f16_to_f32(bits))


# -- binary encoding ---------------------------------------------------------

def pack_layout(layout: Layout) -> bytes:
    out = [_U64.pack(len(layout))]
    for seg in layout:
        name = seg.name.encode("utf-8")
        out += [_U64.pack(len(name)), name, _U64.pack(seg.offset), _U64.pack(seg.length)]
    return b"".join(out)


def unpack_layout(buf, pos: int = 0) -> tuple[Layout, int]:
    try:
        (count,) = _U64.unpack_from(buf, pos)
        pos += 8
        segs = []
        for _ in range(count):
            (nlen,) = _U64.unpack_from(buf, pos)
            pos += 8
            name = bytes(buf[pos:pos + nlen]).decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise ShapeError("truncated segment name")
            pos += nlen
            offset, length = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            segs.append(Segment(name, offset, length))
    except struct.error as exc:
        raise ShapeError(f"truncated layout header: {exc}") from None
    return tuple(segs), pos


def pack_array(layout: Layout, arr: np.ndarray) -> bytes:
    """Layout header followed by the little-endian scalar payload."""
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return pack_layout(layout) + le.tobytes()


def unpack_array(buf, dtype, pos: int = 0, *, span_check: bool = True) -> tuple[Layout, np.ndarray, int]:
    """Inverse of :func:`pack_array`; returns ``(layout, array, end_pos)``.

    With ``span_check`` the layout must start at offset 0 and be contiguous;
    chunks of a larger vector carry their absolute offset and skip the check.
    """
    layout, pos = unpack_layout(buf, pos)
    dt = np.dtype(dtype).newbyteorder("<")
    n = sum(s.length for s in layout)
    end = pos + n * dt.itemsize
    if end > len(buf):
        raise ShapeError("truncated scalar payload")
    arr = np.frombuffer(bytes(buf[pos:end]), dtype=dt).astype(np.dtype(dtype).newbyteorder("="))
    if span_check:
        check_layout(layout, n)
    return layout, arr, end


def to_bytes(v: ParamVector) -> bytes:
    return pack_array(v.layout, v.data)


def from_bytes(buf) -> ParamVector:
    layout, arr, end = unpack_array(buf, np.float32)
    if end != len(buf):
        raise ShapeError("trailing bytes after vector payload")
    return ParamVector(arr, layout)


def stack_equal(vectors: Sequence[ParamVector]) -> bool:
    return all(v == vectors[0] for v in vectors[1:])


@dataclass(frozen=True)
class PseudoGradient:
    """Outer-step gradient ``theta(t) - theta(t+h)`` for one outer epoch.

    ``data`` is float64 so the difference of two FP32 vectors is held exactly;
    ``precision`` names the wire format used when it is all-reduced.
    """

    data: np.ndarray
    layout: Layout
    precision: str = "fp32"
    outer_epoch: int = 0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True).reshape(-1)
        check_layout(tuple(self.layout), arr.size)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "layout", tuple(self.layout))

    def __len__(self):
        return self.data.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())
