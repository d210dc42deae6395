"""The full compression model: g_a, g_s, hyper networks and the latent likelihoods."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from llic import ops
from llic.blocks import BasicBlock, BlockConfig, Conv2d, Downsample, Module, Upsample, _chain
from llic.likelihood import (
    SIGMA_MAX,
    SIGMA_MIN,
    bits,
    factorized_likelihood,
    gaussian_likelihood,
    quantize,
)
from llic.ops import ConvSpec
from llic.tensor import Param, Tensor, as_tensor, clamp, exp, lower_bound, no_grad, sub, take

STAGES = 4
DOWNSCALE = 16
# smallest padded side for which the last stage still sees a 3x3 map
MIN_PADDED = 3 * DOWNSCALE
SIGMA_INIT = 4.0


@dataclass(frozen=True)
class ModelConfig:
    N: int = 192
    M: int = 320
    kernels: tuple[int, ...] = (11, 11, 9, 9)
    synthesis_kernels: tuple[int, ...] = (9, 9, 11, 11)
    blocks_per_stage: int = 1
    hyper_width: int = 0  # 0 means "same as N"
    gate_expansion: int = 2
    condition_hidden: int = 0  # 0 means "same as the block width"
    static_weights: bool = False
    use_ffn_instead_of_gate: bool = False
    linear_embedding: bool = False
    disable_stb: bool = False
    disable_ctb: bool = False
    swap_stb_ctb: bool = False
    layout: str = ""

    def __post_init__(self):
        if self.N <= 0 or self.M <= 0:
            raise ValueError("N and M must be positive")
        for ks in (self.kernels, self.synthesis_kernels):
            if len(ks) != STAGES:
                raise ValueError(f"need {STAGES} kernel sizes per transform, got {ks}")
            if any(k % 2 == 0 or k < 1 for k in ks):
                raise ValueError(f"kernel sizes must be odd and positive, got {ks}")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be >= 0")

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"N": 32, "M": 48, **overrides})

    @property
    def hyper(self) -> int:
        return self.hyper_width or self.N

    def block_config(self, channels: int, K: int) -> BlockConfig:
        return BlockConfig(
            channels=channels,
            kernel_size=K,
            gate_expansion=self.gate_expansion,
            condition_hidden=self.condition_hidden or None,
            static_weights=self.static_weights,
            use_ffn_instead_of_gate=self.use_ffn_instead_of_gate,
            linear_embedding=self.linear_embedding,
            disable_stb=self.disable_stb,
            disable_ctb=self.disable_ctb,
            swap_stb_ctb=self.swap_stb_ctb,
            layout=self.layout,
        )

    def canonical(self) -> str:
        """Sorted ``key=value`` lines; the digest is taken over this text."""
        lines = []
        for k, v in sorted(asdict(self).items()):
            lines.append(f"{k}={format_value(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> int:
        return int.from_bytes(hashlib.sha256(self.canonical().encode()).digest()[:8], "little")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        return cls(**parse_fields(cls, values))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(i) for i in v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_fields(cls, values: dict[str, str]) -> dict:
    """Convert string values to the types declared on dataclass ``cls``; unknown keys are ignored."""
    defaults = cls()
    out = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        cur = getattr(defaults, f.name)
        if not isinstance(raw, str):
            out[f.name] = tuple(raw) if isinstance(cur, tuple) else raw
        elif isinstance(cur, bool):
            out[f.name] = _parse_bool(raw)
        elif isinstance(cur, int):
            out[f.name] = int(raw)
        elif isinstance(cur, float):
            out[f.name] = float(raw)
        elif isinstance(cur, tuple):
            elem = type(cur[0]) if cur else float
            out[f.name] = tuple(elem(p) for p in raw.split(",") if p.strip())
        else:
            out[f.name] = raw.strip()
    return out


def padded_size(h: int, w: int) -> tuple[int, int]:
    def up(v):
        return max(MIN_PADDED, -(-v // DOWNSCALE) * DOWNSCALE)

    return up(h), up(w)


def pad_image(x: np.ndarray) -> np.ndarray:
    """Replicate-pad the last two axes to the codec's working size."""
    h, w = x.shape[-2:]
    ph, pw = padded_size(h, w)
    if (ph, pw) == (h, w):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph - h), (0, pw - w)]
    return np.pad(x, widths, mode="edge")


@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor


@dataclass
class ForwardOutput:
    x_hat: Tensor
    bits_y: Tensor
    bits_z: Tensor
    y: Tensor
    y_hat: Tensor
    z: Tensor
    z_hat: Tensor
    params: GaussianParams
    likelihood_y: Tensor
    likelihood_z: Tensor

    @property
    def total_bits(self) -> float:
        return float(self.bits_y.data + self.bits_z.data)


class FactorizedPrior(Module):
    """Per-channel Gaussian (loc, exp(log_scale)) for the hyper-latent."""

    def __init__(self, channels: int):
        self.loc = Param(np.zeros(channels))
        self.log_scale = Param(np.zeros(channels))

    def scale(self) -> Tensor:
        return lower_bound(exp(self.log_scale), SIGMA_MIN)

    def likelihood(self, z_hat: Tensor) -> Tensor:
        return factorized_likelihood(z_hat, self.loc, self.scale())


class AnalysisTransform(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.down = []
        self.blocks = []
        cin = 3
        for i, K in enumerate(cfg.kernels):
            cout = cfg.M if i == STAGES - 1 else cfg.N
            self.down.append(Downsample(cin, cout, rng))
            self.blocks.append([BasicBlock(cfg.block_config(cout, K), rng) for _ in range(cfg.blocks_per_stage)])
            cin = cout

    def named_params(self, prefix=""):
        for i in range(STAGES):
            yield from self.down[i].named_params(f"{prefix}stage{i}.down.")
            for j, b in enumerate(self.blocks[i]):
                yield from b.named_params(f"{prefix}stage{i}.block{j}.")

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % DOWNSCALE or w % DOWNSCALE:
            raise ValueError(f"analysis input must be a multiple of {DOWNSCALE}, got {h}x{w}")
        for i in range(STAGES):
            x = self.down[i](x)
            for b in self.blocks[i]:
                x = b(x)
        return x

    def macs(self, h, w, prefix):
        items = []
        for i in range(STAGES):
            items.append((f"stage{i}.down", self.down[i]))
            items += [(f"stage{i}.block{j}", b) for j, b in enumerate(self.blocks[i])]
        return _chain(items, h, w, prefix)


class SynthesisTransform(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.blocks = []
        self.up = []
        cin = cfg.M
        for i, K in enumerate(cfg.synthesis_kernels):
            cout = 3 if i == STAGES - 1 else cfg.N
            self.blocks.append(
                [BasicBlock(cfg.block_config(cin, K), rng, inverse=True) for _ in range(cfg.blocks_per_stage)]
            )
            self.up.append(Upsample(cin, cout, rng))
            cin = cout

    def named_params(self, prefix=""):
        for i in range(STAGES):
            for j, b in enumerate(self.blocks[i]):
                yield from b.named_params(f"{prefix}stage{i}.block{j}.")
            yield from self.up[i].named_params(f"{prefix}stage{i}.up.")

    def forward(self, y: Tensor) -> Tensor:
        for i in range(STAGES):
            for b in self.blocks[i]:
                y = b(y)
            y = self.up[i](y)
        return y

    def macs(self, h, w, prefix):
        items = []
        for i in range(STAGES):
            items += [(f"stage{i}.block{j}", b) for j, b in enumerate(self.blocks[i])]
            items.append((f"stage{i}.up", self.up[i]))
        return _chain(items, h, w, prefix)


class HyperAnalysis(Module):
    """conv3 -> leaky -> conv5/2 -> leaky -> conv5/2."""

    def __init__(self, M: int, width: int, rng):
        self.conv0 = Conv2d(ConvSpec(M, width, 3), rng)
        self.conv1 = Conv2d(ConvSpec(width, width, 5, stride=2), rng)
        self.conv2 = Conv2d(ConvSpec(width, width, 5, stride=2), rng)

    def forward(self, y: Tensor) -> Tensor:
        t = ops.leaky_relu(self.conv0(y))
        t = ops.leaky_relu(self.conv1(t))
        return self.conv2(t)

    def macs(self, h, w, prefix):
        return _chain([("conv0", self.conv0), ("conv1", self.conv1), ("conv2", self.conv2)], h, w, prefix)


class HyperSynthesis(Module):
    """Two (conv3 -> pixel shuffle x2 -> leaky) stages, then conv3 to 2M channels."""

    def __init__(self, width: int, M: int, rng):
        self.conv0 = Conv2d(ConvSpec(width, 4 * M, 3), rng)
        self.conv1 = Conv2d(ConvSpec(M, 4 * M, 3), rng)
        self.conv2 = Conv2d(ConvSpec(M, 2 * M, 3), rng)
        # start the scale half near the latent spread of a freshly initialized g_a
        self.conv2.bias.data[M:] = np.log(np.expm1(SIGMA_INIT))
        self.M = M

    def forward(self, z_hat: Tensor, out_hw: tuple[int, int]) -> GaussianParams:
        t = ops.leaky_relu(ops.pixel_shuffle(self.conv0(z_hat), 2))
        t = ops.leaky_relu(ops.pixel_shuffle(self.conv1(t), 2))
        t = self.conv2(t)
        h, w = out_hw
        if t.shape[2] < h or t.shape[3] < w:
            raise ValueError(f"hyper synthesis output {t.shape[2:]} smaller than latent {out_hw}")
        if t.shape[2] != h:
            t = take(t, slice(0, h), axis=2)
        if t.shape[3] != w:
            t = take(t, slice(0, w), axis=3)
        mu, raw = ops.channel_split(t)
        sigma = clamp(lower_bound(ops.softplus(raw), SIGMA_MIN), None, SIGMA_MAX)
        return GaussianParams(mu, sigma)

    def macs(self, h, w, prefix):
        recs, _ = self.conv0.macs(h, w, f"{prefix}.conv0")
        r, _ = self.conv1.macs(2 * h, 2 * w, f"{prefix}.conv1")
        recs += r
        r, out = self.conv2.macs(4 * h, 4 * w, f"{prefix}.conv2")
        return recs + r, out


class LLICModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.config = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        c = self.config
        self.g_a = AnalysisTransform(c, rng)
        self.g_s = SynthesisTransform(c, rng)
        self.h_a = HyperAnalysis(c.M, c.hyper, rng)
        self.h_s = HyperSynthesis(c.hyper, c.M, rng)
        self.prior = FactorizedPrior(c.hyper)
        self.assign_names()
        names = [n for n, _ in self.named_params()]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")

    def named_params(self, prefix=""):
        for key in ("g_a", "g_s", "h_a", "h_s", "prior"):
            yield from getattr(self, key).named_params(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def macs(self, h, w, prefix=""):
        recs, (yh, yw) = self.g_a.macs(h, w, "g_a")
        r, _ = self.g_s.macs(yh, yw, "g_s")
        recs += r
        r, (zh, zw) = self.h_a.macs(yh, yw, "h_a")
        recs += r
        r, _ = self.h_s.macs(zh, zw, "h_s")
        return recs + r, (h, w)

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardOutput:
        """Run the full model; ``x`` must already be padded to a multiple of 16."""
        x = as_tensor(x)
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        y = self.g_a(x)
        z = self.h_a(y)
        if mode == "train":
            if rng is None:
                raise ValueError("train mode needs an rng for the quantization noise")
            z_hat = quantize(z, None, "noise", rng)
        else:
            z_hat = quantize(z, None, "round")
        lik_z = self.prior.likelihood(z_hat)
        gp = self.h_s(z_hat, y.shape[2:])
        if mode == "train":
            y_noisy = quantize(y, None, "noise", rng)
            lik_y = gaussian_likelihood(sub(y_noisy, gp.mu), gp.sigma)
            y_hat = quantize(y, gp.mu, "ste")
            x_hat = self.g_s(y_hat)
        else:
            y_hat = quantize(y, gp.mu, "round")
            lik_y = gaussian_likelihood(np.rint(y.data - gp.mu.data), gp.sigma)
            x_hat = clamp(self.g_s(y_hat), 0.0, 1.0)
        return ForwardOutput(
            x_hat=x_hat,
            bits_y=bits(lik_y),
            bits_z=bits(lik_z),
            y=y,
            y_hat=y_hat,
            z=z,
            z_hat=z_hat,
            params=gp,
            likelihood_y=lik_y,
            likelihood_z=lik_z,
        )


def reconstruct(model: LLICModel, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Eval-mode reconstruction and estimated bits for an unpadded (n, 3, h, w) array."""
    h, w = x.shape[-2:]
    with no_grad():
        out = model(pad_image(x), mode="eval")
    return out.x_hat.data[..., :h, :w], out.total_bits
