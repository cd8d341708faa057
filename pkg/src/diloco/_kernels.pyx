# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the optimizers and the binary16 codec.

Every routine must stay bitwise identical to its counterpart in
``_kernels_py``. Arithmetic is done in double and stored as float, with the
operations written in the same order as the numpy fallback. Build with
``-ffp-contract=off`` so the compiler never fuses a multiply-add.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport uint16_t, uint32_t

cnp.import_array()


def adamw_update(float[::1] p, const float[::1] g, float[::1] m, float[::1] v,
                 double lr, double beta1, double beta2, double eps, double wd,
                 double bc1, double bc2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef double gi, pi, mi, vi, upd
    for i in range(n):
        gi = g[i]
        m[i] = <float>(beta1 * m[i] + c1 * gi)
        v[i] = <float>(beta2 * v[i] + c2 * (gi * gi))
        mi = m[i]
        vi = v[i]
        pi = p[i]
        upd = (mi / bc1) / (sqrt(vi / bc2) + eps) + wd * pi
        p[i] = <float>(pi - lr * upd)


def nesterov_update(float[::1] p, const double[::1] g, float[::1] buf,
                    double lr, double mu):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, b
    for i in range(n):
        gi = g[i]
        buf[i] = <float>(mu * buf[i] + gi)
        b = buf[i]
        p[i] = <float>(p[i] - lr * (gi + mu * b))


cdef inline uint16_t _f32_to_f16(uint32_t f, int* overflow) nogil:
    cdef uint32_t sign = (f >> 16) & 0x8000
    cdef uint32_t exp = f & 0x7f800000
    cdef uint32_t sig, h_sig, h_exp, shift, rem, half
    if exp == 0x7f800000:
        sig = f & 0x007fffff
        if sig != 0:
            h_sig = sig >> 13
            if h_sig == 0:
                h_sig = 1
            return <uint16_t>(sign | 0x7c00 | h_sig)
        return <uint16_t>(sign | 0x7c00)
    if exp >= 0x47800000:
        overflow[0] += 1
        return <uint16_t>(sign | 0x7c00)
    if exp <= 0x38000000:
        # subnormal or zero result
        if exp < 0x33000000:
            return <uint16_t>sign
        exp >>= 23
        sig = 0x00800000 | (f & 0x007fffff)
        shift = 126 - exp
        h_sig = sig >> shift
        rem = sig & ((1u << shift) - 1)
        half = 1u << (shift - 1)
        if rem > half or (rem == half and (h_sig & 1)):
            h_sig += 1
        return <uint16_t>(sign | h_sig)
    h_exp = (exp - 0x38000000) >> 13
    sig = f & 0x007fffff
    h_sig = sig >> 13
    rem = sig & 0x1fff
    if rem > 0x1000 or (rem == 0x1000 and (h_sig & 1)):
        h_sig += 1
    # a carry out of the mantissa bumps the exponent, possibly to infinity
    h_sig += h_exp
    if h_sig >= 0x7c00:
        overflow[0] += 1
        return <uint16_t>(sign | 0x7c00)
    return <uint16_t>(sign | h_sig)


cdef inline uint32_t _f16_to_f32(uint16_t h) nogil:
    cdef uint32_t sign = (<uint32_t>(h & 0x8000)) << 16
    cdef uint32_t exp = h & 0x7c00
    cdef uint32_t sig = h & 0x03ff
    cdef int e
    if exp == 0:
        if sig == 0:
            return sign
        e = 0
        while (sig & 0x0400) == 0:
            sig <<= 1
            e += 1
        sig &= 0x03ff
        return sign | (<uint32_t>(113 - e) << 23) | (sig << 13)
    if exp == 0x7c00:
        return sign | 0x7f800000 | (sig << 13)
    return sign | ((exp + 0x1c000) << 13) | (sig << 13)


def f32_to_f16(const float[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef const uint32_t[::1] bits = np.asarray(x).view(np.uint32)
    out = np.empty(n, dtype=np.uint16)
    cdef uint16_t[::1] o = out
    cdef int overflow = 0
    with nogil:
        for i in range(n):
            o[i] = _f32_to_f16(bits[i], &overflow)
    return out, overflow


def f16_to_f32(const uint16_t[::1] h):
    cdef Py_ssize_t i, n = h.shape[0]
    out = np.empty(n, dtype=np.uint32)
    cdef uint32_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _f16_to_f32(h[i])
    return out.view(np.float32)
