# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: per-sample depthwise convolution and the range coder."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, uint64_t, int64_t

from llic._kernels_py import CorruptStream

cnp.import_array()

cdef enum:
    PRECISION = 16
    TOTAL = 65536
    TOP = 16777216
    BOT = 65536
    CHUNK_BITS = 15

cdef int64_t MAX_ESCAPE = 2147483648


# ---------------------------------------------------------------- convolution

def dw_conv_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] k, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t K = k.shape[2]
    cdef Py_ssize_t ho = h + 2 * pad - K + 1, wo = w + 2 * pad - K + 1
    cdef bint shared = k.shape[0] == 1
    out_arr = np.zeros((n, c, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, a, b, s, ch, i0, i1, j0, j1, si
    cdef double wt
    with nogil:
        for s in range(n):
            si = 0 if shared else s
            for ch in range(c):
                for a in range(K):
                    i0 = pad - a if pad - a > 0 else 0
                    i1 = h + pad - a if h + pad - a < ho else ho
                    for b in range(K):
                        wt = k[si, ch, a, b]
                        j0 = pad - b if pad - b > 0 else 0
                        j1 = w + pad - b if w + pad - b < wo else wo
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                out[s, ch, i, j] += wt * x[s, ch, i + a - pad, j + b - pad]
    return out_arr


def dw_conv_backward(double[:, :, :, ::1] g, double[:, :, :, ::1] x, double[:, :, :, ::1] k, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t K = k.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef bint shared = k.shape[0] == 1
    gx_arr = np.zeros((n, c, h, w))
    gk_arr = np.zeros((k.shape[0], c, K, K))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t i, j, a, b, s, ch, i0, i1, j0, j1, si
    cdef double wt, acc, gv
    with nogil:
        for s in range(n):
            si = 0 if shared else s
            for ch in range(c):
                for a in range(K):
                    i0 = pad - a if pad - a > 0 else 0
                    i1 = h + pad - a if h + pad - a < ho else ho
                    for b in range(K):
                        wt = k[si, ch, a, b]
                        j0 = pad - b if pad - b > 0 else 0
                        j1 = w + pad - b if w + pad - b < wo else wo
                        acc = 0.0
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                gv = g[s, ch, i, j]
                                gx[s, ch, i + a - pad, j + b - pad] += wt * gv
                                acc += gv * x[s, ch, i + a - pad, j + b - pad]
                        gk[si, ch, a, b] += acc
    return gx_arr, gk_arr


# ---------------------------------------------------------------- range coder

cdef struct Enc:
    uint32_t low
    uint32_t range
    unsigned char* buf
    Py_ssize_t n
    Py_ssize_t cap


cdef int enc_put(Enc* e, unsigned char v) except -1:
    if e.n >= e.cap:
        raise MemoryError("range encoder buffer exhausted")
    e.buf[e.n] = v
    e.n += 1
    return 0


cdef int enc_encode(Enc* e, uint32_t cum, uint32_t freq) except -1:
    cdef uint32_t r = e.range >> PRECISION
    cdef uint32_t low = e.low + cum * r
    cdef uint32_t rng = r * freq
    while True:
        if ((<uint64_t>low) ^ ((<uint64_t>low) + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (<uint32_t>(-(<int64_t>low))) & (BOT - 1)
        else:
            break
        enc_put(e, <unsigned char>(low >> 24))
        low = low << 8
        rng = rng << 8
    e.low = low
    e.range = rng
    return 0


cdef int enc_escape(Enc* e, int64_t magnitude, bint negative) except -1:
    cdef int64_t m = magnitude
    cdef uint32_t chunk
    enc_encode(e, (<uint32_t>negative) << (PRECISION - 1), 1 << (PRECISION - 1))
    while True:
        chunk = <uint32_t>(m & ((1 << CHUNK_BITS) - 1))
        m >>= CHUNK_BITS
        if m:
            chunk |= 1 << CHUNK_BITS
        enc_encode(e, chunk, 1)
        if not m:
            break
    return 0


def rc_encode(symbols, table_idx, cdfs, offsets, sizes, halves):
    cdef const int64_t[::1] sym = np.ascontiguousarray(symbols, dtype=np.int64)
    cdef const int64_t[::1] tid = np.ascontiguousarray(table_idx, dtype=np.int64)
    cdef const int64_t[::1] cdf = np.ascontiguousarray(cdfs, dtype=np.int64)
    cdef const int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const int64_t[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef const int64_t[::1] hv = np.ascontiguousarray(halves, dtype=np.int64)
    cdef Py_ssize_t count = sym.shape[0]
    # worst case per symbol: 16-bit escape slot, sign, three 16-bit chunks
    buf_arr = np.empty(count * 12 + 16, dtype=np.uint8)
    cdef unsigned char[::1] buf = buf_arr
    cdef Enc e
    e.low = 0
    e.range = 0xFFFFFFFF
    e.buf = &buf[0]
    e.n = 0
    e.cap = buf.shape[0]
    cdef Py_ssize_t i
    cdef int64_t v, L, s, o, t
    for i in range(count):
        v = sym[i]
        t = tid[i]
        L = hv[t]
        o = off[t]
        if -L <= v <= L:
            s = v + L
            enc_encode(&e, <uint32_t>cdf[o + s], <uint32_t>(cdf[o + s + 1] - cdf[o + s]))
        else:
            if (v if v > 0 else -v) - L - 1 >= MAX_ESCAPE:
                raise ValueError(f"symbol {v} exceeds the escape range")
            s = sz[t] - 1
            enc_encode(&e, <uint32_t>cdf[o + s], <uint32_t>(cdf[o + s + 1] - cdf[o + s]))
            enc_escape(&e, (v if v > 0 else -v) - L - 1, v < 0)
    for i in range(4):
        enc_put(&e, <unsigned char>(e.low >> 24))
        e.low = e.low << 8
    return bytes(buf_arr[: e.n])


cdef struct Dec:
    uint32_t low
    uint32_t range
    uint32_t code
    const unsigned char* buf
    Py_ssize_t pos
    Py_ssize_t n


cdef int dec_byte(Dec* d) except -1:
    if d.pos >= d.n:
        raise CorruptStream("range decoder ran past the end of the payload")
    d.pos += 1
    return d.buf[d.pos - 1]


cdef int64_t dec_target(Dec* d) except -1:
    d.range = d.range >> PRECISION
    cdef uint32_t value = (d.code - d.low) // d.range
    if value >= TOTAL:
        raise CorruptStream("range decoder state out of bounds")
    return value


cdef int dec_consume(Dec* d, uint32_t cum, uint32_t freq) except -1:
    cdef uint32_t low = d.low + cum * d.range
    cdef uint32_t rng = d.range * freq
    cdef uint32_t code = d.code
    while True:
        if ((<uint64_t>low) ^ ((<uint64_t>low) + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (<uint32_t>(-(<int64_t>low))) & (BOT - 1)
        else:
            break
        code = (code << 8) | <uint32_t>dec_byte(d)
        low = low << 8
        rng = rng << 8
    d.low = low
    d.range = rng
    d.code = code
    return 0


def rc_decode(data, table_idx, cdfs, offsets, sizes, halves):
    cdef bytes payload = bytes(data)
    cdef const int64_t[::1] tid = np.ascontiguousarray(table_idx, dtype=np.int64)
    cdef const int64_t[::1] cdf = np.ascontiguousarray(cdfs, dtype=np.int64)
    cdef const int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const int64_t[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef const int64_t[::1] hv = np.ascontiguousarray(halves, dtype=np.int64)
    cdef Py_ssize_t count = tid.shape[0]
    out_arr = np.empty(count, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Dec d
    d.low = 0
    d.range = 0xFFFFFFFF
    d.code = 0
    d.buf = <const unsigned char*>payload
    d.pos = 0
    d.n = len(payload)
    cdef Py_ssize_t i, lo_i, hi_i, mid
    cdef int64_t value, o, S, L, t, m, shift, v
    cdef bint negative
    for i in range(4):
        d.code = (d.code << 8) | <uint32_t>dec_byte(&d)
    for i in range(count):
        t = tid[i]
        o = off[t]
        S = sz[t]
        L = hv[t]
        value = dec_target(&d)
        lo_i = 0
        hi_i = S
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if cdf[o + mid] <= value:
                lo_i = mid
            else:
                hi_i = mid
        dec_consume(&d, <uint32_t>cdf[o + lo_i], <uint32_t>(cdf[o + lo_i + 1] - cdf[o + lo_i]))
        if lo_i == S - 1:
            value = dec_target(&d)
            negative = value >= (1 << (PRECISION - 1))
            dec_consume(&d, (1 << (PRECISION - 1)) if negative else 0, 1 << (PRECISION - 1))
            m = 0
            shift = 0
            while True:
                v = dec_target(&d)
                dec_consume(&d, <uint32_t>v, 1)
                m |= (v & ((1 << CHUNK_BITS) - 1)) << shift
                shift += CHUNK_BITS
                if not (v >> CHUNK_BITS):
                    break
                if shift > 32:
                    raise CorruptStream("escape magnitude overflow")
            if m >= MAX_ESCAPE:
                raise CorruptStream("escape magnitude overflow")
            out[i] = -(m + L + 1) if negative else m + L + 1
        else:
            out[i] = lo_i - L
    if d.pos != d.n:
        raise CorruptStream(
            f"payload has {d.n - d.pos} trailing bytes after {count} symbols"
        )
    return out_arr
