"""Binary checkpoint container for model parameters and optimizer state.

Layout (little-endian): magic ``LLICCKPT``, version u16, config digest u64,
tensor count u32, then per tensor a u16 name length, the UTF-8 name, a u8
rank, u32 extents and the raw float64 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from llic.model import LLICModel, ModelConfig

MAGIC = b"LLICCKPT"
VERSION = 1
CONFIG_KEY = "__config__"
TRAIN_KEY = "__train__"
STEP_KEY = "__state__.step"
LAMBDA_KEY = "__state__.lambda_index"
ADAM_M = "__adam__.m."
ADAM_V = "__adam__.v."


class CheckpointError(ValueError):
    pass


class DigestMismatch(CheckpointError):
    pass


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    model: LLICModel
    state: TrainState | None
    train_text: str
    lambda_index: int


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def write_tensors(path, digest: int, tensors: list[tuple[str, np.ndarray]]) -> None:
    parts = [MAGIC, struct.pack("<HQI", VERSION, digest, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_tensors(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, digest, count = struct.unpack_from("<HQI", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 8 + 14
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return digest, out


def save_checkpoint(
    path,
    model: LLICModel,
    state: TrainState | None = None,
    train_text: str = "",
    lambda_index: int = 255,
) -> None:
    cfg = model.config
    tensors = [(CONFIG_KEY, _text_tensor(cfg.canonical()))]
    if train_text:
        tensors.append((TRAIN_KEY, _text_tensor(train_text)))
    tensors.append((LAMBDA_KEY, np.array(float(lambda_index))))
    tensors += [(name, p.data) for name, p in model.named_params()]
    if state is not None:
        tensors.append((STEP_KEY, np.array(float(state.step))))
        for name, _ in model.named_params():
            if name in state.m:
                tensors.append((ADAM_M + name, state.m[name]))
                tensors.append((ADAM_V + name, state.v[name]))
    write_tensors(path, cfg.digest(), tensors)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Rebuild the model stored at ``path``; refuses when digests disagree."""
    digest, tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: missing model configuration")
    try:
        cfg = ModelConfig.from_mapping(parse_key_values(_tensor_text(tensors[CONFIG_KEY])))
    except (TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable model configuration ({exc})") from exc
    if cfg.digest() != digest:
        raise DigestMismatch(f"{path}: stored digest {digest:016x} does not match its configuration")
    if expected is not None and expected.digest() != digest:
        raise DigestMismatch(f"{path}: checkpoint digest {digest:016x} != expected {expected.digest():016x}")
    model = LLICModel(cfg)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    state = None
    if STEP_KEY in tensors:
        state = TrainState(step=int(tensors[STEP_KEY]))
        for name, _ in model.named_params():
            if ADAM_M + name in tensors:
                state.m[name] = tensors[ADAM_M + name]
                state.v[name] = tensors[ADAM_V + name]
    train_text = _tensor_text(tensors[TRAIN_KEY]) if TRAIN_KEY in tensors else ""
    lam = int(tensors[LAMBDA_KEY]) if LAMBDA_KEY in tensors else 255
    return Checkpoint(model, state, train_text, lam)
