"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    toks = []
    pos = 0
    n = len(data)
    while len(toks) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated header")
        toks.append(data[start:pos])
    return toks, pos


def decode_ppm(data: bytes) -> np.ndarray:
    toks, pos = _tokens(data, 4)
    if toks[0] != b"P6":
        raise PPMError(f"unsupported magic {toks[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PPMError(f"malformed header: {exc}") from exc
    if w <= 0 or h <= 0:
        raise PPMError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise PPMError(f"maxval {maxval} unsupported (need 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after header")
    pos += 1
    need = 3 * w * h
    if len(data) - pos < need:
        raise PPMError(f"truncated payload: {len(data) - pos} of {need} bytes")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, h, w), got {img.shape}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def load_ppm(path) -> np.ndarray:
    """(3, h, w) float64 image with values v/255."""
    return decode_ppm(Path(path).read_bytes())


def save_ppm(img: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def load_dir(path) -> list[tuple[str, np.ndarray]]:
    """All ``*.ppm`` files of a directory in name order."""
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm images in {path}")
    return [(f.name, load_ppm(f)) for f in files]
