import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diloco import kernels
from diloco.errors import ShapeError
from diloco.tensor import (ParamVector, PseudoGradient, decode_fp16, encode_fp16, from_bytes,
                           make_layout, pack_array, round_fp16, to_bytes, unpack_array)

from oracles import f16_value, round_to_f16

f32s = st.floats(width=32, allow_nan=False)


def test_layout_is_contiguous():
    layout = make_layout([("w", 6), ("b", 3)])
    assert [(s.name, s.offset, s.length) for s in layout] == [("w", 0, 6), ("b", 6, 3)]


def test_param_vector_rejects_mismatched_layout():
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(5, np.float32), make_layout([("w", 6)]))


def test_param_vector_is_immutable():
    v = ParamVector(np.arange(3, dtype=np.float32), make_layout([("w", 3)]))
    with pytest.raises(ValueError):
        v.data[0] = 1.0
    assert v.segment("w").tolist() == [0.0, 1.0, 2.0]


@given(st.lists(f32s, min_size=1, max_size=40))
def test_fp16_encode_matches_rational_oracle(values):
    buf = encode_fp16(np.array(values, np.float32))
    for x, bits in zip(values, buf.bits.tolist()):
        expect = round_to_f16(float(np.float32(x)))
        got = f16_value(bits)
        assert got == expect or (got == 0 and expect == 0)
        assert math.copysign(1, got) == math.copysign(1, expect)


def test_fp16_ties_round_to_even():
    # 1 + 2^-11 sits halfway between 1 and the next binary16 value
    x = np.array([1 + 2 ** -11, 1 + 3 * 2 ** -11, 2049.0, 2051.0], np.float32)
    assert round_fp16(x).tolist() == [1.0, 1 + 2 ** -9, 2048.0, 2052.0]


def test_fp16_overflow_goes_to_infinity_and_flags():
    buf = encode_fp16(np.array([65504.0, 65520.0, -1e6], np.float32))
    assert buf.overflow
    vals = [f16_value(b) for b in buf.bits.tolist()]
    assert vals == [65504.0, math.inf, -math.inf]
    assert not encode_fp16(np.array([65519.0], np.float32)).overflow


def test_fp16_specials_round_trip():
    x = np.array([np.inf, -np.inf, np.nan, 0.0, -0.0], np.float32)
    y = round_fp16(x)
    assert np.isposinf(y[0]) and np.isneginf(y[1]) and np.isnan(y[2])
    assert math.copysign(1, y[4]) == -1
    assert not encode_fp16(x).overflow


@given(st.floats(min_value=2 ** -14, max_value=2048, width=32), st.booleans())
def test_fp16_relative_error_bound_in_normal_range(mag, neg):
    x = np.float32(-mag if neg else mag)
    y = round_fp16(np.array([x]))[0]
    assert abs(float(y) - float(x)) <= 2 ** -11 * abs(float(x))


def test_fp16_decode_checks_length():
    buf = encode_fp16(np.ones(4, np.float32))
    with pytest.raises(ShapeError):
        decode_fp16(buf, make_layout([("w", 5)]))
    assert decode_fp16(buf, make_layout([("w", 4)])).data.tolist() == [1.0] * 4


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_codec_backends_agree_on_all_halves(backend):
    mod = kernels.get_backend(backend)
    ref = kernels.get_backend("python")
    codes = np.arange(1 << 16, dtype=np.uint16)
    a = mod.f16_to_f32(codes).view(np.uint32)
    b = ref.f16_to_f32(codes).view(np.uint32)
    nan = np.isnan(ref.f16_to_f32(codes))
    assert np.array_equal(a[~nan], b[~nan])
    x = np.random.default_rng(3).standard_normal(20000).astype(np.float32) * 3e4
    ha, oa = mod.f32_to_f16(x)
    hb, ob = ref.f32_to_f16(x)
    assert np.array_equal(np.asarray(ha), np.asarray(hb)) and oa == ob


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_optimizer_backends_agree_bitwise(backend):
    mod = kernels.get_backend(backend)
    ref = kernels.get_backend("python")
    r = np.random.default_rng(5)
    p0 = r.standard_normal(999).astype(np.float32)
    g = r.standard_normal(999).astype(np.float32)
    d = r.standard_normal(999)
    outs = []
    for m in (mod, ref):
        p, mm, vv, buf = p0.copy(), np.zeros_like(p0), np.zeros_like(p0), np.zeros_like(p0)
        for _ in range(3):
            m.adamw_update(p, g, mm, vv, 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.19, 0.0975)
            m.nesterov_update(p, d, buf, 0.7, 0.9)
        outs.append((p, mm, vv, buf))
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


def test_serialization_is_little_endian():
    layout = make_layout([("w", 2)])
    blob = pack_array(layout, np.array([1.0, -2.0], np.float32))
    assert blob[-8:] == struct.pack("<ff", 1.0, -2.0)


@given(st.lists(f32s, min_size=1, max_size=30), st.integers(1, 3))
def test_vector_bytes_round_trip(values, nseg):
    n = len(values)
    cuts = sorted({0, n, *[(n * i) // nseg for i in range(1, nseg)]})
    layout = make_layout([(f"s{i}", b - a) for i, (a, b) in enumerate(zip(cuts, cuts[1:]))])
    v = ParamVector(np.array(values, np.float32), layout)
    back = from_bytes(to_bytes(v))
    assert back == v and back.layout == v.layout


def test_truncated_and_trailing_bytes_rejected():
    v = ParamVector(np.ones(3, np.float32), make_layout([("w", 3)]))
    blob = to_bytes(v)
    with pytest.raises(ShapeError):
        from_bytes(blob[:-1])
    with pytest.raises(ShapeError):
        from_bytes(blob + b"\0")
    with pytest.raises(ShapeError):
        unpack_array(blob[:5], np.float32)


def test_pseudo_gradient_holds_float64():
    pg = PseudoGradient(np.array([1e-30, 1.0]), make_layout([("w", 2)]))
    assert pg.data.dtype == np.float64 and pg.is_finite()
    with pytest.raises(ShapeError):
        PseudoGradient(np.zeros(3), make_layout([("w", 2)]))
