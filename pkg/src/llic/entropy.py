"""Gaussian CDF tables, range coding of the latents, and the bitstream container."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from llic._backend import CorruptStream, kernels
from llic.likelihood import SIGMA_MAX, SIGMA_MIN
from llic.model import LLICModel, pad_image, padded_size
from llic.tensor import no_grad

PRECISION = 16
TOTAL = 1 << PRECISION
NUM_SCALES = 64
TAIL_MASS = 2.0**-17

MAGIC = b"LLIC"
VERSION = 1
HEADER = struct.Struct("<4sBBHHHHII")
HEADER_SIZE = HEADER.size
NO_LAMBDA = 255


class FormatError(ValueError):
    """Bitstream header is malformed or does not match the decoding model."""


def build_scale_table() -> np.ndarray:
    scales = np.exp(np.linspace(np.log(SIGMA_MIN), np.log(SIGMA_MAX), NUM_SCALES))
    scales[0], scales[-1] = SIGMA_MIN, SIGMA_MAX
    return scales


SCALES = build_scale_table()


def scale_index(sigma) -> np.ndarray:
    """Index of the smallest table scale >= sigma (clipped to the table)."""
    idx = np.searchsorted(SCALES, np.asarray(sigma, dtype=np.float64), side="left")
    return np.clip(idx, 0, NUM_SCALES - 1)


def alphabet_bound(scale: float, offset: float = 0.0) -> int:
    """Smallest L whose per-side tail mass beyond [-L-1/2, L+1/2] is below 2^-17."""
    L = 0
    while True:
        upper = ndtr(-(L + 0.5 - offset) / scale)
        lower = ndtr((-L - 0.5 - offset) / scale)
        if upper < TAIL_MASS and lower < TAIL_MASS:
            return L
        L += 1


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to 2^16 with one trailing escape slot.

    Symbols get ``max(1, floor(2^16 p))`` so each stays within one quantum of
    its mass; the rounding slack goes to the escape slot, which keeps
    escapes cheap when the model is miscalibrated.
    """
    freq = np.maximum(1, np.floor(pmf * TOTAL)).astype(np.int64)
    slack = TOTAL - int(freq.sum())
    if slack >= 1:
        return np.append(freq, slack)
    # too many minimum-frequency symbols: shave the largest ones
    freq = np.append(freq, 1)
    order = np.argsort(-freq[:-1], kind="stable")
    need = 1 - slack
    i = 0
    while need:
        j = order[i % order.size]
        if freq[j] > 1:
            freq[j] -= 1
            need -= 1
        i += 1
    return freq


@dataclass(frozen=True)
class CdfTable:
    cdf: np.ndarray  # int64, length 2L+3, from 0 to 2^16
    L: int

    @property
    def pmf(self) -> np.ndarray:
        return np.diff(self.cdf) / TOTAL


def build_cdf(scale: float, offset: float = 0.0) -> CdfTable:
    """Quantized CDF of a unit-binned N(offset, scale^2) over [-L, L] plus escape."""
    L = alphabet_bound(scale, offset)
    v = np.arange(-L, L + 1, dtype=np.float64) - offset
    pmf = ndtr((v + 0.5) / scale) - ndtr((v - 0.5) / scale)
    freq = quantize_pmf(pmf)
    return CdfTable(np.concatenate([[0], np.cumsum(freq)]).astype(np.int64), L)


@dataclass(frozen=True)
class TableSet:
    """Flat layout consumed by the range-coder kernels."""

    cdfs: np.ndarray
    offsets: np.ndarray
    sizes: np.ndarray
    halves: np.ndarray

    @classmethod
    def from_tables(cls, tables: list[CdfTable]) -> "TableSet":
        sizes = np.array([t.cdf.size - 1 for t in tables], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes + 1)[:-1]]).astype(np.int64)
        return cls(
            np.concatenate([t.cdf for t in tables]).astype(np.int64),
            offsets,
            sizes,
            np.array([t.L for t in tables], dtype=np.int64),
        )

    def encode(self, symbols, table_idx) -> bytes:
        return kernels.rc_encode(
            np.asarray(symbols, dtype=np.int64), np.asarray(table_idx, dtype=np.int64),
            self.cdfs, self.offsets, self.sizes, self.halves,
        )

    def decode(self, data: bytes, table_idx) -> np.ndarray:
        return kernels.rc_decode(
            data, np.asarray(table_idx, dtype=np.int64), self.cdfs, self.offsets, self.sizes, self.halves
        )

    def code_length_bits(self, symbols, table_idx) -> float:
        """Ideal cost of ``symbols`` under the quantized tables (escape payload included)."""
        total = 0.0
        for v, t in zip(np.asarray(symbols, dtype=np.int64).tolist(), np.asarray(table_idx).tolist()):
            L = int(self.halves[t])
            o = int(self.offsets[t])
            s = v + L if -L <= v <= L else int(self.sizes[t]) - 1
            total -= np.log2((self.cdfs[o + s + 1] - self.cdfs[o + s]) / TOTAL)
            if s == int(self.sizes[t]) - 1:
                m = abs(v) - L - 1
                chunks = 1
                while m >> 15:
                    m >>= 15
                    chunks += 1
                total += 1 + 16 * chunks
        return total


@lru_cache(maxsize=1)
def gaussian_tables() -> TableSet:
    return TableSet.from_tables([build_cdf(s) for s in SCALES])


def hyper_tables(model: LLICModel) -> tuple[TableSet, np.ndarray]:
    """Per-channel tables for z and the integer location shift per channel."""
    loc = model.prior.loc.data
    scale = model.prior.scale().data
    shift = np.rint(loc)
    tables = [build_cdf(float(s), float(l - r)) for l, s, r in zip(loc, scale, shift)]
    return TableSet.from_tables(tables), shift.astype(np.int64)


@dataclass
class Bitstream:
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    z_payload: bytes
    y_payload: bytes
    lambda_index: int = NO_LAMBDA
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = HEADER.pack(
            MAGIC, self.version, self.lambda_index, self.orig_h, self.orig_w,
            self.padded_h, self.padded_w, len(self.z_payload), len(self.y_payload),
        )
        return head + self.z_payload + self.y_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise FormatError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
        magic, ver, lam, oh, ow, ph, pw, zl, yl = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if ver != VERSION:
            raise FormatError(f"unsupported version {ver}")
        if oh == 0 or ow == 0 or (ph, pw) != padded_size(oh, ow):
            raise FormatError(f"inconsistent dimensions {oh}x{ow} / {ph}x{pw}")
        if HEADER_SIZE + zl + yl != len(data):
            raise FormatError(f"declared payload {zl}+{yl} bytes, stream carries {len(data) - HEADER_SIZE}")
        z = bytes(data[HEADER_SIZE : HEADER_SIZE + zl])
        y = bytes(data[HEADER_SIZE + zl :])
        return cls(oh, ow, ph, pw, z, y, lam, ver)

    @property
    def num_bits(self) -> int:
        return 8 * (HEADER_SIZE + len(self.z_payload) + len(self.y_payload))

    def bpp(self) -> float:
        return self.num_bits / (self.orig_h * self.orig_w)


@dataclass
class EncodeResult:
    stream: Bitstream
    y_hat: np.ndarray
    z_hat: np.ndarray


def _as_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {x.shape}")
    return x


def _z_shape(model: LLICModel, yh: int, yw: int) -> tuple[int, int]:
    h, w = yh, yw
    for conv in (model.h_a.conv0, model.h_a.conv1, model.h_a.conv2):
        h, w = conv.spec.output_hw(h, w)
    return h, w


def encode_image(x: np.ndarray, model: LLICModel, lambda_index: int = NO_LAMBDA) -> EncodeResult:
    x = _as_image(x)
    h, w = x.shape[2:]
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError("image sides must fit in 16 bits")
    xp = pad_image(x)
    with no_grad():
        y = model.g_a(xp)
        z = model.h_a(y)
        z_hat = np.rint(z.data)
        ztab, shift = hyper_tables(model)
        c, zh, zw = z_hat.shape[1:]
        z_idx = np.repeat(np.arange(c), zh * zw)
        z_sym = (z_hat[0] - shift[:, None, None]).reshape(-1).astype(np.int64)
        z_bytes = ztab.encode(z_sym, z_idx)
        gp = model.h_s(z_hat, y.shape[2:])
        mu, sigma = gp.mu.data, gp.sigma.data
    delta = np.rint(y.data - mu)
    y_hat = delta + mu
    y_bytes = gaussian_tables().encode(delta.reshape(-1).astype(np.int64), scale_index(sigma).reshape(-1))
    ph, pw = xp.shape[2:]
    stream = Bitstream(h, w, ph, pw, z_bytes, y_bytes, lambda_index)
    return EncodeResult(stream, y_hat, z_hat)


@dataclass
class DecodeResult:
    x_hat: np.ndarray  # (3, h, w)
    y_hat: np.ndarray
    z_hat: np.ndarray


def decode_image(data: bytes | Bitstream, model: LLICModel, lambda_index: int | None = None) -> DecodeResult:
    """Reconstruct an image; refuses streams whose header disagrees with the model."""
    stream = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    if lambda_index is not None and stream.lambda_index != lambda_index:
        raise FormatError(f"stream was coded at lambda index {stream.lambda_index}, model is {lambda_index}")
    cfg = model.config
    yh, yw = stream.padded_h // 16, stream.padded_w // 16
    zh, zw = _z_shape(model, yh, yw)
    c = cfg.hyper
    ztab, shift = hyper_tables(model)
    z_idx = np.repeat(np.arange(c), zh * zw)
    z_sym = ztab.decode(stream.z_payload, z_idx).reshape(c, zh, zw)
    z_hat = (z_sym + shift[:, None, None]).astype(np.float64)[None]
    with no_grad():
        gp = model.h_s(z_hat, (yh, yw))
        mu, sigma = gp.mu.data, gp.sigma.data
        delta = gaussian_tables().decode(stream.y_payload, scale_index(sigma).reshape(-1))
        y_hat = delta.reshape(mu.shape).astype(np.float64) + mu
        x_hat = np.clip(model.g_s(y_hat).data, 0.0, 1.0)
    return DecodeResult(x_hat[0, :, : stream.orig_h, : stream.orig_w], y_hat, z_hat)


__all__ = [
    "Bitstream",
    "CdfTable",
    "CorruptStream",
    "FormatError",
    "SCALES",
    "TableSet",
    "build_cdf",
    "build_scale_table",
    "decode_image",
    "encode_image",
    "gaussian_tables",
    "scale_index",
]
