"""Effective-receptive-field maps and multiply-accumulate profiling."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from llic.blocks import MacRecord, condition_gradients
from llic.model import DOWNSCALE, LLICModel, ModelConfig
from llic.tensor import Tensor, backward, reduce, take, tape_scope

NORMALIZATIONS = ("average-then-normalize", "normalize-then-average", "none")


@dataclass
class ERFMap:
    grid: np.ndarray
    digest: int
    count: int
    normalization: str

    def support_radius(self, threshold: float = 1e-12, center: tuple[int, int] | None = None) -> int:
        """Largest Chebyshev distance from ``center`` of an entry above ``threshold``."""
        return support_radius(self.grid, threshold, center)

    def to_pgm(self, path) -> None:
        write_pgm(self.grid, path)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.grid, delimiter=",", fmt="%.9e")


def support_radius(grid: np.ndarray, threshold: float = 1e-12, center: tuple[int, int] | None = None) -> int:
    h, w = grid.shape
    cy, cx = center if center is not None else (h // 2, w // 2)
    ys, xs = np.nonzero(grid > threshold)
    if ys.size == 0:
        return -1
    return int(max(np.abs(ys - cy).max(), np.abs(xs - cx).max()))


def _center_probe(y: Tensor) -> Tensor:
    """Sum over channels of the latent at its centre position."""
    cy, cx = y.shape[2] // 2, y.shape[3] // 2
    col = take(take(y, slice(cy, cy + 1), axis=2), slice(cx, cx + 1), axis=3)
    return reduce("sum", col)


def erf_map(
    model: LLICModel | Callable[[Tensor], Tensor],
    images: Iterable[np.ndarray],
    normalization: str = "average-then-normalize",
    condition_grad: bool = False,
) -> ERFMap:
    """Accumulate |d probe / d x| over the input channels and the image set.

    ``model`` is an LLICModel (its analysis transform is probed) or any
    differentiable callable from (1, 3, s, s) to a latent map.  Kernel and
    channel-factor generators are treated as constants unless
    ``condition_grad`` is set, since their global pooling otherwise spreads
    the gradient over the whole image.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    fn = model.g_a if isinstance(model, LLICModel) else model
    digest = model.config.digest() if isinstance(model, LLICModel) else 0
    maps = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
            raise ValueError(f"ERF images must be square (3, s, s), got {img.shape}")
        if img.shape[1] % DOWNSCALE:
            raise ValueError(f"ERF image size must be a multiple of {DOWNSCALE}, got {img.shape[1]}")
        x = Tensor(img[None].copy(), requires_grad=True)
        with tape_scope(), condition_gradients(condition_grad):
            probe = _center_probe(fn(x))
            backward(probe)
        g = np.zeros(img.shape) if x.grad is None else x.grad
        maps.append(np.abs(g[0]).sum(axis=0))
    if not maps:
        raise ValueError("no images given")
    if normalization == "normalize-then-average":
        grid = np.mean([m / m.max() if m.max() > 0 else m for m in maps], axis=0)
    else:
        grid = np.mean(maps, axis=0)
        if normalization == "average-then-normalize" and grid.max() > 0:
            grid = grid / grid.max()
    return ERFMap(grid, digest, len(maps), normalization)


def theoretical_radius(config: ModelConfig) -> int:
    """Receptive-field half-width of one latent of the analysis transform, in input pixels.

    Each layer adds (K - 1) / 2 times the product of the strides before it.
    Pooling-based condition branches are excluded (they are global).
    """
    r = 0
    jump = 1
    for K in config.kernels:
        r += 2 * jump  # 5x5, stride 2
        jump *= 2
        r += jump  # 3x3 depthwise of the DepthRB
        for _ in range(config.blocks_per_stage):
            for kind in config.block_config(1, K).block_layout():
                emb = 0 if config.linear_embedding else 1
                r += jump * (emb + (K // 2 if kind == "stb" else 0))
    return r


def write_pgm(grid: np.ndarray, path) -> None:
    """8-bit P5 image of ``log1p`` of the grid, scaled so the maximum maps to 255."""
    g = np.log1p(np.maximum(np.asarray(grid, dtype=np.float64), 0.0))
    peak = g.max()
    px = np.zeros(g.shape, dtype=np.uint8) if peak <= 0 else np.rint(255.0 * g / peak).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


# ---------------------------------------------------------------- MACs


@dataclass
class MacsReport:
    resolution: tuple[int, int]
    records: list[MacRecord]
    per_module: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(r.macs for r in self.records)

    def per_pixel(self) -> float:
        return self.total / (self.resolution[0] * self.resolution[1])

    def format(self, detail: bool = False) -> str:
        h, w = self.resolution
        lines = [f"resolution {w}x{h}"]
        if detail:
            lines += [f"  {r.path:<60s} {r.macs:>16,d}  {r.out_shape}" for r in self.records]
        for name, v in self.per_module.items():
            lines.append(f"{name:<6s} {v:>18,d}")
        lines.append(f"total  {self.total:>18,d}  ({self.per_pixel():,.1f} per pixel)")
        return "\n".join(lines)


def count_macs(config: ModelConfig | LLICModel, resolution: tuple[int, int]) -> MacsReport:
    """Forward-pass MACs of g_a, g_s, h_a and h_s at ``resolution`` (h, w)."""
    h, w = resolution
    if h % DOWNSCALE or w % DOWNSCALE:
        raise ValueError(f"resolution must be a multiple of {DOWNSCALE}, got {h}x{w}")
    model = config if isinstance(config, LLICModel) else _structure_only(config)
    records, _ = model.macs(h, w)
    per_module: dict[str, int] = defaultdict(int)
    for r in records:
        per_module[r.path.split(".", 1)[0]] += r.macs
    return MacsReport((h, w), records, dict(per_module))


def _structure_only(config: ModelConfig) -> LLICModel:
    # weights do not influence the count, a fixed seed keeps this cheap and repeatable
    return LLICModel(config, seed=0)


def parse_resolution(text: str) -> tuple[int, int]:
    """``WxH`` -> (h, w)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"resolution must look like 768x512, got {text!r}") from exc
    return h, w
