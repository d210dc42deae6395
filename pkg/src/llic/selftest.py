"""Fast invariant checks for every module, printed as a pass/fail table."""

from __future__ import annotations

import io
import tempfile
import traceback
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from typing import Callable

import numpy as np

from llic import ops
from llic.analysis import count_macs, erf_map, support_radius
from llic.blocks import CTB, STB, BasicBlock, BlockConfig, DepthRB, FFN, Gate, per_pixel_macs
from llic.checkpoint import DigestMismatch, load_checkpoint, save_checkpoint
from llic.entropy import FormatError, TableSet, build_cdf, decode_image, encode_image
from llic.metrics import RDCurve, bd_rate, ms_ssim, psnr
from llic.model import LLICModel, ModelConfig
from llic.ops import ConvSpec
from llic.samples import synthetic_image
from llic.tensor import Param, Tensor, grad_check, mul, reduce, tanh
from llic.train import TrainConfig, lr_schedule

GRAD_TOL = 1e-5


def _check_tensor():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((2, 3)))
    b = rng.standard_normal((2, 3))
    assert grad_check(lambda t: tanh(mul(t, b)), a) < GRAD_TOL
    assert grad_check(lambda t: reduce("mean", mul(t, t), axes=1), a) < GRAD_TOL


def _check_ops():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)))
    w = Param(rng.standard_normal((4, 1, 3, 3)))
    spec = ConvSpec(4, 4, 3, groups=4)
    assert grad_check(lambda t: ops.conv2d(t, spec, w), x) < GRAD_TOL
    back = ops.pixel_unshuffle(ops.pixel_shuffle(x, 2), 2)
    assert np.array_equal(back.data, x.data)


def _zero(module):
    for _, p in module.named_params():
        p.data[...] = 0.0
    return module


def _check_blocks():
    rng = np.random.default_rng(2)
    cfg = BlockConfig(8, kernel_size=5)
    x = Tensor(rng.standard_normal((1, 8, 8, 8)))
    for blk in (DepthRB(8, rng), Gate(8, rng), FFN(8, rng), STB(cfg, rng), CTB(cfg, rng), BasicBlock(cfg, rng)):
        assert np.array_equal(_zero(blk)(x).data, x.data), type(blk).__name__
    assert per_pixel_macs(Gate(192, rng)) == 110_784
    assert per_pixel_macs(FFN(192, rng)) == 147_840


def _check_codec_net():
    model = LLICModel(ModelConfig.desk_scale(), seed=0)
    img = synthetic_image(37, 50, seed=3)
    res = encode_image(img, model)
    dec = decode_image(res.stream.to_bytes(), model)
    assert dec.x_hat.shape == img.shape
    assert np.array_equal(dec.y_hat, res.y_hat)


def _check_entropy():
    rng = np.random.default_rng(4)
    tables = TableSet.from_tables([build_cdf(s) for s in (0.3, 2.0, 17.0)])
    sym = np.rint(rng.standard_normal(3000) * 6).astype(np.int64)
    sym[::97] = 40_000  # escapes
    idx = rng.integers(0, 3, size=sym.size)
    assert np.array_equal(tables.decode(tables.encode(sym, idx), idx), sym)
    model = LLICModel(ModelConfig.desk_scale(), seed=0)
    try:
        decode_image(b"XXXX" + bytes(40), model)
    except FormatError:
        pass
    else:
        raise AssertionError("bad magic accepted")


def _check_checkpoint():
    model = LLICModel(ModelConfig.desk_scale(), seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path).model
        for (n1, p1), (n2, p2) in zip(model.named_params(), loaded.named_params()):
            assert n1 == n2 and np.array_equal(p1.data, p2.data)
        try:
            load_checkpoint(path, expected=ModelConfig.desk_scale(N=16))
        except DigestMismatch:
            pass
        else:
            raise AssertionError("digest mismatch not detected")


def _check_training():
    cfg = TrainConfig(total_steps=100)
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(99, cfg) == 1e-6


def _check_metrics():
    x = np.full((3, 16, 16), 0.5)
    assert abs(psnr(x, x + 1 / 255) - 48.1308) < 1e-3
    img = synthetic_image(176, 176, seed=6)
    assert ms_ssim(img, img) == 1.0
    curve = RDCurve.from_arrays([0.2, 0.4, 0.8, 1.6], [28.0, 31.0, 34.0, 37.0])
    assert bd_rate(curve, curve) == 0.0


def _check_analysis():
    rng = np.random.default_rng(7)
    assert ConvSpec(192, 192, 11, groups=192).macs(1, 1) == 23_232
    assert ConvSpec(192, 192, 1).macs(1, 1) == 36_864
    w = Param(rng.standard_normal((4, 3, 1, 1)))
    emap = erf_map(lambda t: ops.conv2d(t, ConvSpec(3, 4, 1), w), [rng.uniform(size=(3, 16, 16))])
    assert support_radius(emap.grid) == 0
    rep = count_macs(ModelConfig.desk_scale(), (64, 64))
    assert rep.total == sum(r.macs for r in rep.records)


def _check_cli():
    from llic.cli import build_parser, main

    build_parser()
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        assert main(["macs", "--set", "preset=desk", "--res", "64x64"]) == 0
        assert main(["encode", "--ckpt", "/nonexistent/m.ckpt", "--in", "a.ppm", "--out", "a.llic"]) == 2
        assert main(["macs", "--bogus"]) == 1


CHECKS: list[tuple[str, str, Callable[[], None]]] = [
    ("tensor-core", "gradients match central differences", _check_tensor),
    ("nn-ops", "conv gradient, pixel shuffle inverse", _check_ops),
    ("llic-blocks", "zero-init identity, gate/ffn MACs", _check_blocks),
    ("codec-net", "encode/decode dims and latent equality", _check_codec_net),
    ("entropy-coder", "round trip with escapes, bad magic", _check_entropy),
    ("codec-net", "checkpoint round trip and digest check", _check_checkpoint),
    ("training-harness", "learning-rate schedule", _check_training),
    ("metrics-eval", "psnr, ms-ssim identity, zero BD-rate", _check_metrics),
    ("analysis-tools", "MAC arithmetic, pointwise ERF", _check_analysis),
    ("cli", "dispatch and exit codes", _check_cli),
]


def run_selftest(verbose: bool = True) -> bool:
    ok_all = True
    rows = []
    for module, name, fn in CHECKS:
        try:
            fn()
            status, detail = "PASS", ""
        except Exception as exc:  # report every failure, keep going
            status, detail = "FAIL", f"{type(exc).__name__}: {exc}"
            ok_all = False
            if verbose:
                traceback.print_exc()
        rows.append((module, name, status, detail))
    if verbose:
        width = max(len(r[0]) for r in rows)
        for module, name, status, detail in rows:
            print(f"{status}  {module:<{width}}  {name}" + (f"  ({detail})" if detail else ""))
        print(f"{sum(r[2] == 'PASS' for r in rows)}/{len(rows)} checks passed")
    return ok_all
