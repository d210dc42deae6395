"""Deterministic synthetic RGB images for tests, self-checks and benchmarks."""

from __future__ import annotations

import numpy as np


def synthetic_image(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Smooth gradients, a few discs and stripes plus mild noise, in [0, 1], shape (3, h, w)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, phase = rng.uniform(0.2, 0.8, size=3)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * 3 * xx + b * 2 * yy) + 6 * phase)
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.25)
        color = rng.uniform(0, 1, size=3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = color[:, None]
    stripes = (np.sin(2 * np.pi * 12 * xx) > 0) & (yy > 0.7)
    img[:, stripes] *= 0.6
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)
