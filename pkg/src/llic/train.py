"""Rate-distortion training: loss, Adam, learning-rate schedule, patch sampling, loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from llic.checkpoint import TrainState, load_checkpoint, parse_key_values, save_checkpoint
from llic.metrics import ms_ssim_tensor
from llic.model import DOWNSCALE, MIN_PADDED, LLICModel, ModelConfig, format_value, parse_fields
from llic.tensor import Param, Tensor, add, as_tensor, backward, mul, reduce, scale, sub, tape_scope

MSE_LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
MSSSIM_LAMBDAS = (2.40, 4.58, 8.73, 16.64, 31.73, 60.50)


@dataclass(frozen=True)
class TrainConfig:
    lmbda: float = 0.0130
    distortion: str = "mse"
    total_steps: int = 2_000_000
    batch_size: int = 16
    lr: float = 1e-4
    # fractions of total_steps at which the rate drops to the next value
    lr_milestones: tuple[float, ...] = (0.85, 0.9, 0.95, 0.975)
    lr_values: tuple[float, ...] = (3e-5, 1e-5, 3e-6, 1e-6)
    patch_size: int = 256
    large_patch_size: int = 512
    curriculum_fraction: float = 0.6
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")
        if self.distortion not in ("mse", "msssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if len(self.lr_milestones) != len(self.lr_values):
            raise ValueError("lr_milestones and lr_values must have equal length")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be increasing")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps >= 0 and batch_size >= 1 required")
        for s in (self.patch_size, self.large_patch_size):
            if s < MIN_PADDED or s % DOWNSCALE:
                raise ValueError(f"patch sizes must be multiples of {DOWNSCALE} and >= {MIN_PADDED}, got {s}")

    @property
    def lambda_index(self) -> int:
        ladder = MSE_LAMBDAS if self.distortion == "mse" else MSSSIM_LAMBDAS
        for i, v in enumerate(ladder):
            if abs(v - self.lmbda) <= 1e-12 * max(1.0, v):
                return i
        return 255

    def canonical(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        vals = dict(values)
        # an empty milestone list is written as a bare key
        for key in ("lr_milestones", "lr_values"):
            if key in vals and isinstance(vals[key], str) and not vals[key].strip():
                vals[key] = ()
        return cls(**parse_fields(cls, vals))


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Flat key=value file holding any ModelConfig/TrainConfig fields.

    ``preset=desk`` starts from the desk-scale widths.
    """
    with open(path) as fh:
        values = parse_key_values(fh.read())
    return configs_from_mapping(values)


def configs_from_mapping(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    known = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)} | {"preset"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    preset = values.get("preset", "").strip()
    base = {}
    if preset == "desk":
        base = {"N": "32", "M": "48"}
    elif preset not in ("", "paper"):
        raise ValueError(f"unknown preset {preset!r}")
    model_cfg = ModelConfig.from_mapping({**base, **values})
    return model_cfg, TrainConfig.from_mapping(values)


# ---------------------------------------------------------------- loss


def rd_loss(x, out, lmbda: float, distortion: str = "mse") -> tuple[Tensor, float, float]:
    """``R + lambda * D`` with R in bits per pixel.

    Returns the loss tensor together with the float values of R and D.
    """
    x = as_tensor(x)
    n, _, h, w = x.shape
    rate = scale(add(out.bits_y, out.bits_z), 1.0 / (n * h * w))
    if distortion == "mse":
        diff = sub(out.x_hat, x)
        dist = scale(reduce("mean", mul(diff, diff)), 255.0**2)
    elif distortion == "msssim":
        dist = add(scale(ms_ssim_tensor(x, out.x_hat), -1.0), 1.0)
    else:
        raise ValueError(f"unknown distortion {distortion!r}")
    loss = add(rate, scale(dist, lmbda))
    return loss, float(rate.data), float(dist.data)


# ---------------------------------------------------------------- optimizer


class MissingGradient(RuntimeError):
    pass


def adam_step(
    named: Sequence[tuple[str, Param]],
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place; gradients are cleared afterwards."""
    missing = [n for n, p in named if p.grad is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in named:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate; milestones are fractions of ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    lr = cfg.lr
    for frac, value in zip(cfg.lr_milestones, cfg.lr_values):
        if step >= frac * cfg.total_steps:
            lr = value
    return lr


# ---------------------------------------------------------------- data


def patch_size_at(step: int, cfg: TrainConfig) -> int:
    return cfg.patch_size if step < cfg.curriculum_fraction * cfg.total_steps else cfg.large_patch_size


def sample_patch(image: np.ndarray, step: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform random square crop; small images are edge-padded first."""
    s = patch_size_at(step, cfg)
    _, h, w = image.shape
    if h < s or w < s:
        image = np.pad(image, ((0, 0), (0, max(0, s - h)), (0, max(0, s - w))), mode="edge")
        _, h, w = image.shape
    top = int(rng.integers(0, h - s + 1))
    left = int(rng.integers(0, w - s + 1))
    return image[:, top : top + s, left : left + s]


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so resuming needs no stored RNG state."""
    return np.random.default_rng([seed, step])


# ---------------------------------------------------------------- loop


@dataclass
class StepLog:
    step: int
    loss: float
    rate: float
    distortion: float
    lr: float


def train(
    model: LLICModel,
    images: Sequence[np.ndarray],
    cfg: TrainConfig,
    state: TrainState | None = None,
    steps: int | None = None,
    checkpoint_path=None,
    callback: Callable[[StepLog], None] | None = None,
) -> tuple[TrainState, list[StepLog]]:
    """Run optimizer steps from ``state.step`` up to ``steps`` (default ``total_steps``)."""
    if not images:
        raise ValueError("no training images")
    state = state or TrainState()
    end = cfg.total_steps if steps is None else steps
    named = list(model.named_params())
    logs = []
    while state.step < end:
        step = state.step
        rng = step_rng(cfg.seed, step)
        batch = []
        for _ in range(cfg.batch_size):
            img = images[int(rng.integers(len(images)))] if len(images) > 1 else images[0]
            batch.append(sample_patch(img, step, cfg, rng))
        x = np.stack(batch)
        with tape_scope():
            out = model(x, mode="train", rng=rng)
            loss, r, d = rd_loss(x, out, cfg.lmbda, cfg.distortion)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at step {step}")
            backward(loss)
        lr = lr_schedule(step, cfg)
        adam_step(named, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        entry = StepLog(step, float(loss.data), r, d, lr)
        logs.append(entry)
        if callback is not None:
            callback(entry)
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, state, cfg.canonical(), cfg.lambda_index)
    return state, logs


def resume(path, images: Sequence[np.ndarray], steps: int | None = None, **kwargs):
    """Continue a run from a checkpoint written by :func:`train`."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_mapping(parse_key_values(ckpt.train_text)) if ckpt.train_text else TrainConfig()
    state, logs = train(ckpt.model, images, cfg, ckpt.state or TrainState(), steps, **kwargs)
    return ckpt.model, cfg, state, logs
