"""Pure-Python/NumPy versions of the hot kernels.

Byte-for-byte compatible with the compiled ``_kernels`` extension for the
range coder; the depthwise convolution agrees to rounding (same per-output
accumulation order in the forward pass).
"""

from __future__ import annotations

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF
CHUNK_BITS = 15
MAX_ESCAPE = 1 << 31


class CorruptStream(ValueError):
    pass


# ---------------------------------------------------------------- convolution


def dw_conv_forward(x: np.ndarray, k: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    K = k.shape[-1]
    ho = h + 2 * pad - K + 1
    wo = w + 2 * pad - K + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, c, ho, wo))
    for a in range(K):
        for b in range(K):
            out += xp[:, :, a : a + ho, b : b + wo] * k[:, :, a, b, None, None]
    return out


def dw_conv_backward(g: np.ndarray, x: np.ndarray, k: np.ndarray, pad: int):
    n, c, h, w = x.shape
    K = k.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros(xp.shape)
    gk = np.zeros(k.shape)
    batch_shared = k.shape[0] == 1 and n > 1
    for a in range(K):
        for b in range(K):
            gxp[:, :, a : a + ho, b : b + wo] += g * k[:, :, a, b, None, None]
            prod = (g * xp[:, :, a : a + ho, b : b + wo]).sum(axis=(2, 3))
            gk[:, :, a, b] = prod.sum(axis=0) if batch_shared else prod
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return np.ascontiguousarray(gx), gk


# ---------------------------------------------------------------- range coder


class _Encoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        low = (self.low + cum * r) & MASK
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low = low
        self.range = rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append(low >> 24)
            low = (low << 8) & MASK
        return bytes(self.out)


class _Decoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStream("range decoder ran past the end of the payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self.range >>= PRECISION
        value = ((self.code - self.low) & MASK) // self.range
        if value >= TOTAL:
            raise CorruptStream("range decoder state out of bounds")
        return value

    def consume(self, cum: int, freq: int) -> None:
        low = (self.low + cum * self.range) & MASK
        rng = self.range * freq
        code = self.code
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            code = ((code << 8) | self._byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low = low
        self.range = rng
        self.code = code


def _encode_escape(enc: _Encoder, magnitude: int, negative: bool) -> None:
    enc.encode(int(negative) << (PRECISION - 1), 1 << (PRECISION - 1))
    m = magnitude
    while True:
        chunk = m & ((1 << CHUNK_BITS) - 1)
        m >>= CHUNK_BITS
        enc.encode(chunk | ((1 << CHUNK_BITS) if m else 0), 1)
        if not m:
            break


def _decode_escape(dec: _Decoder) -> tuple[int, bool]:
    half = 1 << (PRECISION - 1)
    bit = dec.target() >= half
    dec.consume(half if bit else 0, half)
    m = 0
    shift = 0
    while True:
        v = dec.target()
        dec.consume(v, 1)
        m |= (v & ((1 << CHUNK_BITS) - 1)) << shift
        shift += CHUNK_BITS
        if not v >> CHUNK_BITS:
            break
        if shift > 32:
            raise CorruptStream("escape magnitude overflow")
    if m >= MAX_ESCAPE:
        raise CorruptStream("escape magnitude overflow")
    return m, bit


def rc_encode(symbols, table_idx, cdfs, offsets, sizes, halves) -> bytes:
    """Encode signed integers; symbol ``v`` with table ``t`` maps to slot ``v + L_t``.

    Slot ``sizes[t] - 1`` is the escape slot for ``|v| > L_t``.
    """
    enc = _Encoder()
    cdfs = [int(v) for v in cdfs]
    for v, t in zip(np.asarray(symbols).tolist(), np.asarray(table_idx).tolist()):
        L = int(halves[t])
        off = int(offsets[t])
        if -L <= v <= L:
            s = v + L
            lo = cdfs[off + s]
            enc.encode(lo, cdfs[off + s + 1] - lo)
        else:
            if abs(v) - L - 1 >= MAX_ESCAPE:
                raise ValueError(f"symbol {v} exceeds the escape range")
            s = int(sizes[t]) - 1
            lo = cdfs[off + s]
            enc.encode(lo, cdfs[off + s + 1] - lo)
            _encode_escape(enc, abs(v) - L - 1, v < 0)
    return enc.finish()


def rc_decode(data: bytes, table_idx, cdfs, offsets, sizes, halves) -> np.ndarray:
    dec = _Decoder(bytes(data))
    cdfs = [int(v) for v in cdfs]
    tidx = np.asarray(table_idx).tolist()
    out = np.empty(len(tidx), dtype=np.int64)
    for i, t in enumerate(tidx):
        off = int(offsets[t])
        S = int(sizes[t])
        L = int(halves[t])
        value = dec.target()
        lo_i, hi_i = 0, S
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if cdfs[off + mid] <= value:
                lo_i = mid
            else:
                hi_i = mid
        s = lo_i
        lo = cdfs[off + s]
        dec.consume(lo, cdfs[off + s + 1] - lo)
        if s == S - 1:
            m, negative = _decode_escape(dec)
            mag = m + L + 1
            out[i] = -mag if negative else mag
        else:
            out[i] = s - L
    if dec.pos != len(dec.data):
        raise CorruptStream(
            f"payload has {len(dec.data) - dec.pos} trailing bytes after {len(tidx)} symbols"
        )
    return out
