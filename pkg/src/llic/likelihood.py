"""Quantization and discretized-Gaussian likelihoods for the latents."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from llic import ops
from llic.tensor import Tensor, _unbroadcast, add, as_tensor, log, lower_bound, record, reduce, reshape, scale, sub

LIKELIHOOD_FLOOR = 1e-9
SIGMA_MIN = 0.11
SIGMA_MAX = 256.0

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pdf(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def gaussian_pmf(delta, sigma) -> np.ndarray:
    """Mass of the unit-width bin centred on ``delta`` under N(0, sigma^2), unfloored."""
    d = np.abs(np.asarray(delta, dtype=np.float64))
    s = np.asarray(sigma, dtype=np.float64)
    return ndtr((0.5 - d) / s) - ndtr((-0.5 - d) / s)


def gaussian_likelihood(delta, sigma) -> Tensor:
    """Phi((d+1/2)/s) - Phi((d-1/2)/s), floored at 1e-9.

    Evaluated on |d| so the upper tail keeps full precision.  ``sigma`` may
    broadcast against ``delta``.
    """
    delta = as_tensor(delta)
    sigma = as_tensor(sigma)
    d = np.abs(delta.data)
    s = sigma.data
    upper = (0.5 - d) / s
    lower = (-0.5 - d) / s
    p = ndtr(upper) - ndtr(lower)

    def backward_fn(g):
        pu, pl = _pdf(upper), _pdf(lower)
        gd = gs = None
        if delta.requires_grad:
            gd = _unbroadcast(g * np.sign(delta.data) * (pl - pu) / s, delta.shape)
        if sigma.requires_grad:
            gs = _unbroadcast(g * (pl * lower - pu * upper) / s, sigma.shape)
        return gd, gs

    return lower_bound(record(p, (delta, sigma), backward_fn), LIKELIHOOD_FLOOR)


def factorized_likelihood(z_hat, loc: Tensor, scale_: Tensor) -> Tensor:
    """Per-channel Gaussian bin mass for the hyper-latent; ``loc``/``scale`` are (c,)."""
    z_hat = as_tensor(z_hat)
    c = z_hat.shape[1]
    loc4 = reshape(as_tensor(loc), (1, c, 1, 1))
    scale4 = reshape(as_tensor(scale_), (1, c, 1, 1))
    return gaussian_likelihood(sub(z_hat, loc4), scale4)


def quantize(y, mu, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """``noise``: y + U(-1/2, 1/2); ``round``: round(y - mu) + mu; ``ste``: rounding with identity gradient."""
    y = as_tensor(y)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an rng")
        return add(y, rng.uniform(-0.5, 0.5, size=y.shape))
    if mode == "round":
        mu_d = as_tensor(mu).data if mu is not None else 0.0
        return Tensor(np.rint(y.data - mu_d) + mu_d)
    if mode == "ste":
        if mu is None:
            return ops.ste_round(y)
        return add(ops.ste_round(sub(y, mu)), mu)
    raise ValueError(f"unknown quantization mode {mode!r}")


def bits(pmf: Tensor) -> Tensor:
    """Total -log2(pmf)."""
    return scale(reduce("sum", log(pmf, clamp=True)), -1.0 / np.log(2.0))
