"""Layer primitives on :class:`~llic.tensor.Tensor`: convolutions, pooling,
normalization, activations, pixel shuffle and channel split/concat.

Convolution is cross-correlation (no kernel flip) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from llic import _backend
from llic.tensor import Tensor, as_tensor, concat, record, take

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_COEF = 0.044715


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | None = None
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups {self.groups}"
            )
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel_size // 2)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        k = self.kernel_size
        return k * k * (self.in_channels // self.groups) * self.out_channels * ho * wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, k, k) -> (n, c*k*k, ho*wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(xp_shape)
    for a in range(k):
        for b in range(k):
            out[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += cols[:, :, a, b]
    return out


def _dense_conv(x: Tensor, weight: Tensor, spec: ConvSpec) -> Tensor:
    n, cin, h, w = x.shape
    cout = spec.out_channels
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    if k == 1 and s == 1 and p == 0:
        xm = x.data.reshape(n, cin, h * w)
        wm = weight.data.reshape(cout, cin)
        out = np.matmul(wm, xm).reshape(n, cout, ho, wo)

        def backward_fn(g):
            gm = g.reshape(n, cout, h * w)
            gx = np.matmul(wm.T, gm).reshape(x.shape) if x.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = np.tensordot(gm, xm, axes=([0, 2], [0, 2])).reshape(weight.shape)
            return gx, gw

        return record(out, (x, weight), backward_fn)

    xp = _pad(x.data, p)
    cols = _im2col(xp, k, s, ho, wo)
    wm = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols).reshape(n, cout, ho, wo)

    def backward_fn(g):
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gm)
            gxp = _col2im(gcols, xp.shape, k, s, ho, wo)
            gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w]) if p else gxp
        if weight.requires_grad:
            gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        return gx, gw

    return record(out, (x, weight), backward_fn)


def _depthwise(x: Tensor, kernels: Tensor, pad: int) -> Tensor:
    """Stride-1 depthwise correlation; ``kernels`` is (n or 1, c, K, K)."""
    kern = _backend.kernels
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernels.data)
    out = kern.dw_conv_forward(xd, kd, pad)

    def backward_fn(g):
        gx, gk = kern.dw_conv_backward(np.ascontiguousarray(g), xd, kd, pad)
        return (gx if x.requires_grad else None), (gk if kernels.requires_grad else None)

    return record(out, (x, kernels), backward_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    c = bias.shape[0]

    def backward_fn(g):
        return g, g.sum(axis=(0, 2, 3))

    return record(x.data + bias.data.reshape(1, c, 1, 1), (x, bias), backward_fn)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"input {x.shape} does not match {spec}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight {weight.shape} != expected {spec.weight_shape}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho <= 0 or wo <= 0:
        raise ValueError(f"convolution output would be empty for input {x.shape}")

    if spec.groups == 1:
        out = _dense_conv(x, weight, spec)
    elif spec.depthwise and spec.stride == 1 and spec.kernel_size - 1 == 2 * spec.padding:
        out = _depthwise(x, reshape_kernels(weight), spec.padding)
    else:
        gin = spec.in_channels // spec.groups
        gout = spec.out_channels // spec.groups
        sub = ConvSpec(gin, gout, spec.kernel_size, spec.stride, spec.padding, 1, False)
        parts = []
        for gi in range(spec.groups):
            xs = take(x, slice(gi * gin, (gi + 1) * gin), axis=1)
            ws = take(weight, slice(gi * gout, (gi + 1) * gout), axis=0)
            parts.append(_dense_conv(xs, ws, sub))
        out = concat(parts, axis=1)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def reshape_kernels(weight: Tensor) -> Tensor:
    """(c, 1, K, K) depthwise weight -> (1, c, K, K) kernel batch."""
    c, _, k, _ = weight.shape
    return record(weight.data.reshape(1, c, k, k), (weight,), lambda g: (g.reshape(weight.shape),))


def conv2d_dynamic_depthwise(x: Tensor, kernels: Tensor, padding: int | None = None) -> Tensor:
    """Convolve sample i, channel j with ``kernels[i, j]`` (generated at run time)."""
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    K = kernels.shape[-1]
    if K % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {K}")
    if kernels.ndim != 4 or kernels.shape[1] != x.shape[1] or kernels.shape[0] not in (1, x.shape[0]):
        raise ValueError(f"kernels {kernels.shape} do not match input {x.shape}")
    pad = K // 2 if padding is None else padding
    return _depthwise(x, kernels, pad)


def _bins(n: int, out: int) -> list[tuple[int, int]]:
    # floor start, ceil end: neighbouring bins overlap when out does not divide n
    return [((i * n) // out, -((-(i + 1) * n) // out)) for i in range(out)]


def adaptive_avg_pool(x: Tensor, out: tuple[int, int] = (3, 3)) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = out
    if h < oh or w < ow:
        raise ValueError(f"input {h}x{w} smaller than pool output {oh}x{ow}")
    rows, cols = _bins(h, oh), _bins(w, ow)
    res = np.empty((n, c, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            res[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].sum(axis=(2, 3)) / ((r1 - r0) * (c1 - c0))

    def backward_fn(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return record(res, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every (n, h, w) position, then scale-shift."""
    x = as_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * g4
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return record(out, (x, gamma, beta), backward_fn)


def gelu_tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    inner = SQRT_2_OVER_PI * (d + GELU_COEF * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward_fn(g):
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return record(out, (x,), backward_fn)


def activation(kind: str, x: Tensor, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        slope = 0.0
    elif kind != "leaky_relu":
        raise ValueError(f"unknown activation {kind!r}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return record(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def leaky_relu(x: Tensor) -> Tensor:
    return activation("leaky_relu", x)


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return record(out, (x,), lambda g: (g / (1.0 + np.exp(-x.data)),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    x = as_tensor(x)
    n, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise ValueError(f"{cr2} channels not divisible by {r * r}")
    c = cr2 // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward_fn(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return record(np.ascontiguousarray(out), (x,), backward_fn)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    x = as_tensor(x)
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ValueError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward_fn(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return record(np.ascontiguousarray(out), (x,), backward_fn)


def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    x = as_tensor(x)
    c2 = x.shape[1]
    if c2 % 2:
        raise ValueError(f"cannot split odd channel count {c2}")
    c = c2 // 2
    return take(x, slice(0, c), axis=1), take(x, slice(c, c2), axis=1)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


def ste_round(x: Tensor) -> Tensor:
    """Round in the forward pass, identity gradient in the backward pass."""
    x = as_tensor(x)
    return record(np.rint(x.data), (x,), lambda g: (g,))


def channel_scale(x: Tensor, factors: Tensor) -> Tensor:
    """x (n, c, h, w) times per-sample per-channel factors (n, c)."""
    if factors.shape != x.shape[:2]:
        raise ValueError(f"factors shape {factors.shape} does not match {x.shape[:2]}")
    f4 = factors.data[:, :, None, None]

    def backward_fn(g):
        gx = g * f4 if x.requires_grad else None
        gf = (g * x.data).sum(axis=(2, 3)) if factors.requires_grad else None
        return gx, gf

    return record(x.data * f4, (x, factors), backward_fn)


def pad_replicate(x: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Edge-pad the last two axes up to a multiple of ``multiple``."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not ph and not pw:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, widths, mode="edge")
