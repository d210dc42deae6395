"""Quality and rate metrics: PSNR, MS-SSIM, BD-rate and rate-saving curves."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from llic import ops
from llic.tensor import Tensor, as_tensor, clamp_min, div, exp, log, mul, reduce, reshape, scale, sub

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give the 100 dB cap."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray, data_range: float):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sides get one zero row/column on each border."""
    ph, pw = x.shape[-2] % 2, x.shape[-1] % 2
    if ph or pw:
        x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def min_side_for_ms_ssim(levels: int = 5, window: int = WINDOW) -> int:
    """Sides must exceed this value for the coarsest scale to fit the window."""
    return (window - 1) * 2 ** (levels - 1)


def ms_ssim(x: np.ndarray, x_hat: np.ndarray, data_range: float = 1.0) -> float:
    """Five-scale MS-SSIM, computed per channel and averaged."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_hat, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    limit = min_side_for_ms_ssim()
    if min(x.shape[-2:]) <= limit:
        raise ValueError(f"MS-SSIM needs both sides > {limit}, got {x.shape[-2:]}")
    g = gaussian_window()
    levels = MS_SSIM_WEIGHTS.size
    factors = []
    for i in range(levels):
        ssim_c, cs_c = _ssim_terms(x, y, g, data_range)
        if i < levels - 1:
            factors.append(np.maximum(cs_c, 0.0))
            x, y = _avg_pool2(x), _avg_pool2(y)
        else:
            factors.append(np.maximum(ssim_c, 0.0))
    stacked = np.stack(factors)
    w = MS_SSIM_WEIGHTS.reshape((-1,) + (1,) * (stacked.ndim - 1))
    return float(np.prod(stacked**w, axis=0).mean())


# ---------------------------------------------------------------- differentiable MS-SSIM


def _t_filter(x: Tensor, kern: Tensor) -> Tensor:
    return ops.conv2d_dynamic_depthwise(x, kern, padding=0)


def _t_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("differentiable MS-SSIM needs even sides at every scale")
    u = ops.pixel_unshuffle(x, 2)
    return reduce("mean", reshape(u, (n, c, 4, h // 2, w // 2)), axes=2)


def ms_ssim_tensor(x, x_hat: Tensor, data_range: float = 1.0) -> Tensor:
    """MS-SSIM on the tape (for the MS-SSIM distortion mode); batch-averaged scalar."""
    x = as_tensor(x)
    x_hat = as_tensor(x_hat)
    n, c, h, w = x.shape
    if min(h, w) <= min_side_for_ms_ssim():
        raise ValueError(f"MS-SSIM needs both sides > {min_side_for_ms_ssim()}")
    g = gaussian_window()
    kern = Tensor(np.broadcast_to(np.outer(g, g), (1, c, WINDOW, WINDOW)).copy())
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    levels = MS_SSIM_WEIGHTS.size
    acc = None
    for i in range(levels):
        mx, my = _t_filter(x, kern), _t_filter(x_hat, kern)
        sxx = sub(_t_filter(mul(x, x), kern), mul(mx, mx))
        syy = sub(_t_filter(mul(x_hat, x_hat), kern), mul(my, my))
        sxy = sub(_t_filter(mul(x, x_hat), kern), mul(mx, my))
        cs_map = div(scale(sxy, 2.0) + c2, sxx + syy + c2)
        if i < levels - 1:
            term = reduce("mean", cs_map, axes=(2, 3))
            x, x_hat = _t_pool(x), _t_pool(x_hat)
        else:
            lum = div(scale(mul(mx, my), 2.0) + c1, mul(mx, mx) + mul(my, my) + c1)
            term = reduce("mean", mul(lum, cs_map), axes=(2, 3))
        # relu(term)^w, with the log clamped away from zero
        powered = exp(scale(log(clamp_min(term, 1e-9), clamp=True), float(MS_SSIM_WEIGHTS[i])))
        acc = powered if acc is None else mul(acc, powered)
    return reduce("mean", acc)


# ---------------------------------------------------------------- RD curves


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    msssim: float | None = None
    lambda_index: int = -1


class RDCurve:
    """RD points sorted by bpp; bpp must be positive and strictly increasing."""

    def __init__(self, points: Iterable[RDPoint]):
        pts = sorted(points, key=lambda p: p.bpp)
        if any(p.bpp <= 0 for p in pts):
            raise ValueError("bpp must be positive")
        if any(b.bpp <= a.bpp for a, b in zip(pts, pts[1:])):
            raise ValueError("bpp values must be distinct")
        self.points = pts
        if any(b.psnr < a.psnr for a, b in zip(pts, pts[1:])):
            warnings.warn("PSNR decreases with rate on this curve", stacklevel=2)

    @classmethod
    def from_arrays(cls, bpp: Sequence[float], quality: Sequence[float], field: str = "psnr") -> "RDCurve":
        if field == "psnr":
            return cls(RDPoint(float(b), float(q)) for b, q in zip(bpp, quality))
        return cls(RDPoint(float(b), 0.0, float(q)) for b, q in zip(bpp, quality))

    def __len__(self) -> int:
        return len(self.points)

    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def quality(self, field: str = "psnr") -> np.ndarray:
        vals = [getattr(p, field) for p in self.points]
        if any(v is None for v in vals):
            raise ValueError(f"curve lacks {field} values")
        return np.array(vals, dtype=np.float64)


def _as_curve(c) -> RDCurve:
    if isinstance(c, RDCurve):
        return c
    arr = np.asarray(c, dtype=np.float64)
    return RDCurve.from_arrays(arr[:, 0], arr[:, 1])


def _cubic_fit(q: np.ndarray, logr: np.ndarray) -> np.ndarray:
    vander = np.vander(q, 4)
    coef, _, rank, _ = np.linalg.lstsq(vander, logr, rcond=None)
    if rank < 4:
        raise ValueError("degenerate BD-rate fit (quality values not distinct enough)")
    return coef


def bd_rate(anchor, test, quality: str = "psnr") -> float:
    """Average bitrate difference (percent) of ``test`` relative to ``anchor`` at equal quality."""
    a, t = _as_curve(anchor), _as_curve(test)
    if len(a) < 4 or len(t) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    qa, qt = a.quality(quality), t.quality(quality)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("curves have no overlapping quality range")
    pa = np.polyint(_cubic_fit(qa, np.log10(a.bpp())))
    pt = np.polyint(_cubic_fit(qt, np.log10(t.bpp())))
    area_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    area_t = np.polyval(pt, hi) - np.polyval(pt, lo)
    avg = (area_t - area_a) / (hi - lo)
    return float((10.0**avg - 1.0) * 100.0)


def _spline(curve: RDCurve, quality: str) -> CubicSpline:
    q = curve.quality(quality)
    order = np.argsort(q, kind="stable")
    q = q[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be strictly monotone for spline interpolation")
    return CubicSpline(q, np.log10(curve.bpp()[order]), bc_type="natural")


def rate_saving_curve(anchor, test, grid: Sequence[float], quality: str = "psnr") -> list[tuple[float, float]]:
    """Percent bitrate change of ``test`` against ``anchor`` at each grid quality."""
    a, t = _as_curve(anchor), _as_curve(test)
    grid = np.asarray(grid, dtype=np.float64)
    qa, qt = a.quality(quality), t.quality(quality)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if grid.size and (grid.min() < lo or grid.max() > hi):
        raise ValueError(f"grid [{grid.min()}, {grid.max()}] extrapolates beyond [{lo}, {hi}]")
    sa, st = _spline(a, quality), _spline(t, quality)
    saving = (10.0 ** (st(grid) - sa(grid)) - 1.0) * 100.0
    return list(zip(grid.tolist(), saving.tolist()))


def parse_grid(spec: str) -> np.ndarray:
    """``lo:hi:step`` inclusive of both ends (within rounding)."""
    try:
        lo, hi, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ValueError(f"grid must look like lo:hi:step, got {spec!r}") from exc
    if step <= 0 or hi < lo:
        raise ValueError(f"bad grid {spec!r}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


CSV_FIELDS = ("lambda_index", "bpp", "psnr", "msssim")


def write_curve_csv(curve: RDCurve | Sequence[RDPoint], path) -> None:
    points = curve.points if isinstance(curve, RDCurve) else list(curve)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_FIELDS)
        for p in points:
            wr.writerow([p.lambda_index, repr(p.bpp), repr(p.psnr), "" if p.msssim is None else repr(p.msssim)])


def read_curve_csv(path) -> RDCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(CSV_FIELDS) - set(rows[0]):
        raise ValueError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
    pts = []
    for r in rows:
        ms = r["msssim"].strip()
        pts.append(RDPoint(float(r["bpp"]), float(r["psnr"]), float(ms) if ms else None, int(r["lambda_index"])))
    return RDCurve(pts)


def image_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.ppm"))
