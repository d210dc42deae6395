"""Transform blocks: DepthRB, Gate, FFN, SCST, SCCT, STB, CTB, basic blocks,
and the down/upsampling blocks that open each stage.

Every module exposes ``macs(h, w, prefix)`` returning per-layer records and
the output spatial size, so complexity is counted from the same structure
that runs the forward pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from llic import ops
from llic.ops import ConvSpec
from llic.tensor import Param, Tensor, add, detach, mul, reshape

_condition_grad = {"enabled": True}


@contextlib.contextmanager
def condition_gradients(enabled: bool):
    """Treat generated kernels/channel factors as constants while disabled."""
    prev = _condition_grad["enabled"]
    _condition_grad["enabled"] = enabled
    try:
        yield
    finally:
        _condition_grad["enabled"] = prev


@dataclass(frozen=True)
class MacRecord:
    path: str
    macs: int
    out_shape: tuple[int, int, int]


class Module:
    """Minimal parameter container; child modules and Params are discovered by attribute."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Param):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_params(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{path}.{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_params(prefix):
            p.name = name

    def zero_(self) -> "Module":
        for p in self.params():
            p.data[...] = 0.0
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, gain: float = 1.0):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel_size**2
        bound = gain / np.sqrt(fan_in)
        self.weight = Param(_uniform(rng, spec.weight_shape, bound))
        self.bias = Param(_uniform(rng, (spec.out_channels,), bound)) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.spec, self.weight, self.bias)

    def macs(self, h: int, w: int, prefix: str):
        ho, wo = self.spec.output_hw(h, w)
        return [MacRecord(prefix, self.spec.macs(h, w), (self.spec.out_channels, ho, wo))], (ho, wo)


def conv1x1(cin: int, cout: int, rng, gain: float = 1.0) -> Conv2d:
    return Conv2d(ConvSpec(cin, cout, 1, padding=0), rng, gain)


class LayerNorm(Module):
    def __init__(self, c: int):
        self.gamma = Param(np.ones(c))
        self.beta = Param(np.zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, 1e-6)

    def macs(self, h, w, prefix):
        return [], (h, w)


def _chain(items, h, w, prefix):
    recs = []
    for name, mod in items:
        r, (h, w) = mod.macs(h, w, f"{prefix}.{name}" if prefix else name)
        recs.extend(r)
    return recs, (h, w)


def _elementwise_record(path: str, c: int, h: int, w: int) -> MacRecord:
    return MacRecord(path, c * h * w, (c, h, w))


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    kernel_size: int = 11
    gate_expansion: int = 2
    condition_pool: int = 3
    condition_hidden: int | None = None
    static_weights: bool = False
    use_ffn_instead_of_gate: bool = False
    linear_embedding: bool = False
    disable_stb: bool = False
    disable_ctb: bool = False
    swap_stb_ctb: bool = False
    layout: str = ""

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.gate_expansion % 2 or self.gate_expansion < 2:
            raise ValueError("gate_expansion must be an even multiple of c")

    @property
    def hidden(self) -> int:
        return self.condition_hidden or self.channels

    def block_layout(self, inverse: bool = False) -> tuple[str, ...]:
        """Sub-block order for a basic block ("stb", "ctb")."""
        if self.layout:
            order = tuple(s.strip() for s in self.layout.split(",") if s.strip())
        else:
            order = ("stb", "ctb")
            if self.swap_stb_ctb:
                order = ("ctb", "stb")
            order = tuple(
                s for s in order if not (s == "stb" and self.disable_stb) and not (s == "ctb" and self.disable_ctb)
            )
        return tuple(reversed(order)) if inverse else order


class DepthRB(Module):
    """1x1 conv -> act -> 3x3 depthwise -> act -> 1x1 conv, plus the input."""

    def __init__(self, c: int, rng):
        self.conv1 = conv1x1(c, c, rng)
        self.dw = Conv2d(ConvSpec(c, c, 3, groups=c), rng)
        self.conv2 = conv1x1(c, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        t = ops.leaky_relu(self.conv1(x))
        t = ops.leaky_relu(self.dw(t))
        return add(x, self.conv2(t))

    def macs(self, h, w, prefix):
        return _chain([("conv1", self.conv1), ("dw", self.dw), ("conv2", self.conv2)], h, w, prefix)


class LinearEmbed(Module):
    """Single 1x1 convolution used when the DepthRB embedding is ablated."""

    def __init__(self, c: int, rng):
        self.conv = conv1x1(c, c, rng)

    def forward(self, x):
        return self.conv(x)

    def macs(self, h, w, prefix):
        return _chain([("conv", self.conv)], h, w, prefix)


class Gate(Module):
    """Expand to 2c, split, Hadamard product, project back, add the input."""

    def __init__(self, c: int, rng, expansion: int = 2):
        self.c = c
        self.expand = conv1x1(c, expansion * c, rng)
        self.project = conv1x1(expansion * c // 2, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        f1, f2 = ops.channel_split(self.expand(x))
        return add(self.project(mul(f1, f2)), x)

    def macs(self, h, w, prefix):
        recs, _ = self.expand.macs(h, w, f"{prefix}.expand")
        half = self.expand.spec.out_channels // 2
        recs.append(_elementwise_record(f"{prefix}.product", half, h, w))
        r, _ = self.project.macs(h, w, f"{prefix}.project")
        return recs + r, (h, w)


class FFN(Module):
    """Expand to 2c, tanh-GELU, project back, add the input."""

    def __init__(self, c: int, rng, expansion: int = 2):
        self.expand = conv1x1(c, expansion * c, rng)
        self.project = conv1x1(expansion * c, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        return add(self.project(ops.gelu_tanh(self.expand(x))), x)

    def macs(self, h, w, prefix):
        recs, _ = self.expand.macs(h, w, f"{prefix}.expand")
        # GELU counted as one multiply per element
        recs.append(_elementwise_record(f"{prefix}.gelu", self.expand.spec.out_channels, h, w))
        r, _ = self.project.macs(h, w, f"{prefix}.project")
        return recs + r, (h, w)


class _Condition(Module):
    """Pool to 3x3, valid 3x3 conv to 1x1, then 1x1 conv to ``out`` values per sample."""

    def __init__(self, c: int, hidden: int, out: int, rng, pool: int = 3, gain: float = 1.0):
        self.pool = pool
        self.conv3 = Conv2d(ConvSpec(c, hidden, pool, padding=0), rng)
        self.conv1 = conv1x1(hidden, out, rng, gain)

    def forward(self, x: Tensor) -> Tensor:
        pooled = ops.adaptive_avg_pool(x, (self.pool, self.pool))
        return self.conv1(self.conv3(pooled))

    def macs(self, h, w, prefix):
        return _chain([("conv3", self.conv3), ("conv1", self.conv1)], self.pool, self.pool, prefix)


class SCST(Module):
    """Self-conditioned spatial transform: per-sample depthwise KxK kernels."""

    def __init__(self, c: int, K: int, rng, hidden: int | None = None, static: bool = False, pool: int = 3):
        self.c = c
        self.K = K
        self.static = static
        self.main = conv1x1(c, c, rng)
        if static:
            self.kernels = Param(_uniform(rng, (c, K, K), 1.0 / K))
            self.condition = None
        else:
            # gain 1/K keeps the generated kernel's response near unit scale
            self.condition = _Condition(c, hidden or c, c * K * K, rng, pool, gain=1.0 / K)
            self.kernels = None

    def generate_kernels(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if self.static:
            return reshape(self.kernels, (1, self.c, self.K, self.K))
        kern = reshape(self.condition(x), (n, self.c, self.K, self.K))
        return kern if _condition_grad["enabled"] else detach(kern)

    def forward(self, x: Tensor) -> Tensor:
        kern = self.generate_kernels(x)
        return ops.conv2d_dynamic_depthwise(self.main(x), kern, self.K // 2)

    def macs(self, h, w, prefix):
        recs = []
        if self.condition is not None:
            recs, _ = self.condition.macs(h, w, f"{prefix}.condition")
        r, _ = self.main.macs(h, w, f"{prefix}.main")
        recs += r
        recs.append(MacRecord(f"{prefix}.dynamic_dw", self.K * self.K * self.c * h * w, (self.c, h, w)))
        return recs, (h, w)


class SCCT(Module):
    """Self-conditioned channel transform: per-sample channel importance factors."""

    def __init__(self, c: int, rng, hidden: int | None = None, pool: int = 3):
        self.c = c
        self.main = conv1x1(c, c, rng)
        self.condition = _Condition(c, hidden or c, c, rng, pool)

    def factors(self, x: Tensor) -> Tensor:
        f = reshape(self.condition(x), (x.shape[0], self.c))
        return f if _condition_grad["enabled"] else detach(f)

    def forward(self, x: Tensor) -> Tensor:
        return ops.channel_scale(self.main(x), self.factors(x))

    def macs(self, h, w, prefix):
        recs, _ = self.condition.macs(h, w, f"{prefix}.condition")
        r, _ = self.main.macs(h, w, f"{prefix}.main")
        recs += r
        recs.append(_elementwise_record(f"{prefix}.scale", self.c, h, w))
        return recs, (h, w)


class _TransformBlock(Module):
    """norm -> embed -> core transform -> 1x1 -> +input; norm -> gate -> +mid."""

    def __init__(self, cfg: BlockConfig, core: Module, rng):
        c = cfg.channels
        self.norm1 = LayerNorm(c)
        self.embed = LinearEmbed(c, rng) if cfg.linear_embedding else DepthRB(c, rng)
        self.core = core
        self.proj = conv1x1(c, c, rng)
        self.norm2 = LayerNorm(c)
        self.gate = FFN(c, rng, cfg.gate_expansion) if cfg.use_ffn_instead_of_gate else Gate(c, rng, cfg.gate_expansion)

    def forward(self, x: Tensor) -> Tensor:
        u = self.embed(self.norm1(x))
        mid = add(self.proj(self.core(u)), x)
        return add(self.gate(self.norm2(mid)), mid)

    def macs(self, h, w, prefix):
        items = [("embed", self.embed), ("core", self.core), ("proj", self.proj), ("gate", self.gate)]
        return _chain(items, h, w, prefix)


class STB(_TransformBlock):
    def __init__(self, cfg: BlockConfig, rng):
        core = SCST(cfg.channels, cfg.kernel_size, rng, cfg.hidden, cfg.static_weights, cfg.condition_pool)
        super().__init__(cfg, core, rng)


class CTB(_TransformBlock):
    def __init__(self, cfg: BlockConfig, rng):
        super().__init__(cfg, SCCT(cfg.channels, rng, cfg.hidden, cfg.condition_pool), rng)


class BasicBlock(Module):
    """STB then CTB (forward); the inverse block switches their positions."""

    def __init__(self, cfg: BlockConfig, rng, inverse: bool = False):
        self.inverse = inverse
        self.order = cfg.block_layout(inverse)
        self.blocks = [STB(cfg, rng) if kind == "stb" else CTB(cfg, rng) for kind in self.order]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x

    def macs(self, h, w, prefix):
        return _chain([(f"blocks.{i}", b) for i, b in enumerate(self.blocks)], h, w, prefix)


class Downsample(Module):
    """Stride-2 5x5 conv followed by a DepthRB."""

    def __init__(self, cin: int, cout: int, rng):
        self.conv = Conv2d(ConvSpec(cin, cout, 5, stride=2, padding=2), rng)
        self.rb = DepthRB(cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsampling needs even spatial size, got {h}x{w}")
        return self.rb(self.conv(x))

    def macs(self, h, w, prefix):
        return _chain([("conv", self.conv), ("rb", self.rb)], h, w, prefix)


class Upsample(Module):
    """3x3 conv to 4*cout, pixel shuffle by 2, then a DepthRB."""

    def __init__(self, cin: int, cout: int, rng):
        self.conv = Conv2d(ConvSpec(cin, 4 * cout, 3), rng)
        self.rb = DepthRB(cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.rb(ops.pixel_shuffle(self.conv(x), 2))

    def macs(self, h, w, prefix):
        recs, _ = self.conv.macs(h, w, f"{prefix}.conv")
        r, out = self.rb.macs(2 * h, 2 * w, f"{prefix}.rb")
        return recs + r, out


def per_pixel_macs(module: Module, h: int = 1, w: int = 1) -> int:
    """MACs of ``module`` divided by the pixel count (spatially uniform layers only)."""
    recs, _ = module.macs(h, w, "")
    return sum(r.macs for r in recs) // (h * w)
