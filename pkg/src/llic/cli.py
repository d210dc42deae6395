"""Command-line entry point: ``llic <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 format or digest, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _kv_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_configs(path: str | None, overrides: dict[str, str]):
    from llic.checkpoint import parse_key_values
    from llic.train import configs_from_mapping

    values = {}
    if path:
        values = parse_key_values(Path(path).read_text())
    values.update(overrides)
    try:
        return configs_from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    from llic.checkpoint import load_checkpoint, save_checkpoint
    from llic.model import LLICModel
    from llic.ppm import load_dir
    from llic.train import train

    overrides = _kv_overrides(args.set)
    for flag, key in (("lmbda", "lmbda"), ("steps", "total_steps"), ("batch_size", "batch_size"), ("seed", "seed")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = str(val)
    model_cfg, train_cfg = _load_configs(args.config, overrides)
    images = [img for _, img in load_dir(args.data)]
    state = None
    if args.resume:
        ckpt = load_checkpoint(_require_file(args.resume), expected=model_cfg)
        model, state = ckpt.model, ckpt.state
    else:
        model = LLICModel(model_cfg, seed=train_cfg.seed)

    def log(entry):
        if args.log_every and (entry.step + 1) % args.log_every == 0:
            print(f"step {entry.step + 1:>8d}  loss {entry.loss:.5f}  bpp {entry.rate:.4f}  D {entry.distortion:.5f}  lr {entry.lr:.2e}")

    state, _ = train(model, images, train_cfg, state=state, checkpoint_path=args.out, callback=log)
    save_checkpoint(args.out, model, state, train_cfg.canonical(), train_cfg.lambda_index)
    print(f"wrote {args.out} after {state.step} steps")
    return EXIT_OK


def cmd_encode(args) -> int:
    from llic.checkpoint import load_checkpoint
    from llic.entropy import encode_image
    from llic.ppm import load_ppm

    ckpt = load_checkpoint(_require_file(args.ckpt))
    img = load_ppm(_require_file(args.inp))
    t0 = time.perf_counter()
    res = encode_image(img, ckpt.model, ckpt.lambda_index)
    elapsed = time.perf_counter() - t0
    data = res.stream.to_bytes()
    Path(args.out).write_bytes(data)
    h, w = img.shape[1:]
    print(f"{args.out}: {len(data)} bytes, {8 * len(data) / (h * w):.4f} bpp")
    if args.time:
        print(f"encode time {elapsed:.3f} s")
    return EXIT_OK


def cmd_decode(args) -> int:
    from llic.checkpoint import load_checkpoint
    from llic.entropy import decode_image
    from llic.ppm import save_ppm

    ckpt = load_checkpoint(_require_file(args.ckpt))
    data = _require_file(args.inp).read_bytes()
    t0 = time.perf_counter()
    res = decode_image(data, ckpt.model, ckpt.lambda_index)
    elapsed = time.perf_counter() - t0
    save_ppm(res.x_hat, args.out)
    print(f"{args.out}: {res.x_hat.shape[2]}x{res.x_hat.shape[1]}")
    if args.time:
        print(f"decode time {elapsed:.3f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from llic.checkpoint import load_checkpoint
    from llic.entropy import decode_image, encode_image
    from llic.metrics import RDPoint, min_side_for_ms_ssim, ms_ssim, psnr, write_curve_csv
    from llic.ppm import load_dir

    images = load_dir(args.images)
    points = []
    for path in args.ckpt:
        ckpt = load_checkpoint(_require_file(path))
        bits = pixels = 0
        psnrs, ssims = [], []
        for _, img in images:
            res = encode_image(img, ckpt.model, ckpt.lambda_index)
            rec = decode_image(res.stream.to_bytes(), ckpt.model).x_hat
            bits += res.stream.num_bits
            pixels += img.shape[1] * img.shape[2]
            psnrs.append(psnr(img, rec))
            if min(img.shape[1:]) > min_side_for_ms_ssim():
                ssims.append(ms_ssim(img, rec))
        ms = float(np.mean(ssims)) if len(ssims) == len(images) else None
        points.append(RDPoint(bits / pixels, float(np.mean(psnrs)), ms, ckpt.lambda_index))
        print(f"{path}: bpp {bits / pixels:.4f}  psnr {np.mean(psnrs):.3f}" + (f"  ms-ssim {ms:.5f}" if ms else ""))
    write_curve_csv(points, args.out)
    return EXIT_OK


def cmd_bdrate(args) -> int:
    from llic.metrics import bd_rate, read_curve_csv

    a = read_curve_csv(_require_file(args.anchor))
    t = read_curve_csv(_require_file(args.test))
    print(f"BD-rate ({args.quality}): {bd_rate(a, t, args.quality):+.4f} %")
    return EXIT_OK


def cmd_ratesave(args) -> int:
    from llic.metrics import parse_grid, rate_saving_curve, read_curve_csv

    a = read_curve_csv(_require_file(args.anchor))
    t = read_curve_csv(_require_file(args.test))
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("psnr,rate_change_percent")
    for q, s in rate_saving_curve(a, t, grid):
        print(f"{q:.4f},{s:.4f}")
    return EXIT_OK


def _center_crop(img: np.ndarray, s: int) -> np.ndarray:
    _, h, w = img.shape
    if h < s or w < s:
        img = np.pad(img, ((0, 0), (0, max(0, s - h)), (0, max(0, s - w))), mode="edge")
        _, h, w = img.shape
    top, left = (h - s) // 2, (w - s) // 2
    return img[:, top : top + s, left : left + s]


def cmd_erf(args) -> int:
    from llic.analysis import erf_map
    from llic.checkpoint import load_checkpoint
    from llic.ppm import load_dir

    if args.size < 16 or args.size % 16:
        raise UsageError(f"--size must be a positive multiple of 16, got {args.size}")
    ckpt = load_checkpoint(_require_file(args.ckpt))
    crops = [_center_crop(img, args.size) for _, img in load_dir(args.images)]
    emap = erf_map(ckpt.model, crops, args.normalization, args.condition_grad)
    for out in args.out.split(","):
        out = out.strip()
        if out.endswith(".pgm"):
            emap.to_pgm(out)
        elif out.endswith(".csv"):
            emap.to_csv(out)
        else:
            raise UsageError(f"--out entries must end in .pgm or .csv, got {out!r}")
    print(f"support radius (1e-12): {emap.support_radius()} px over {emap.count} images")
    return EXIT_OK


def cmd_macs(args) -> int:
    from llic.analysis import count_macs, parse_resolution

    model_cfg, _ = _load_configs(args.config, _kv_overrides(args.set))
    try:
        res = parse_resolution(args.res)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(count_macs(model_cfg, res).format(detail=args.detail))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from llic.selftest import run_selftest

    return EXIT_OK if run_selftest(verbose=True) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="llic", description="Learned image codec with self-conditioned large-kernel transforms.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model on a directory of PPM images")
    t.add_argument("--config", help="key=value config file (ModelConfig and TrainConfig fields)")
    t.add_argument("--data", required=True, help="directory of .ppm training images")
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--lmbda", type=float, help="rate-distortion trade-off")
    t.add_argument("--steps", type=int, help="total optimizer steps")
    t.add_argument("--batch-size", type=int, help="patches per step")
    t.add_argument("--seed", type=int, help="random seed")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    t.add_argument("--log-every", type=int, default=100, help="print a progress line every N steps (0: silent)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress a PPM image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True, help="input .ppm")
    e.add_argument("--out", required=True, help="output bitstream")
    e.add_argument("--time", action="store_true", help="report wall-clock encode time")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress a bitstream to PPM")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True, help="input bitstream")
    d.add_argument("--out", required=True, help="output .ppm")
    d.add_argument("--time", action="store_true", help="report wall-clock decode time")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="RD point per checkpoint over an image directory")
    v.add_argument("--ckpt", required=True, action="append", help="checkpoint (repeat once per lambda)")
    v.add_argument("--images", required=True, help="directory of .ppm images")
    v.add_argument("--out", required=True, help="CSV: lambda_index,bpp,psnr,msssim")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate of a test curve against an anchor")
    b.add_argument("--anchor", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--quality", choices=("psnr", "msssim"), default="psnr")
    b.set_defaults(func=cmd_bdrate)

    r = sub.add_parser("ratesave", help="rate change at fixed PSNR via cubic splines")
    r.add_argument("--anchor", required=True)
    r.add_argument("--test", required=True)
    r.add_argument("--grid", required=True, help="lo:hi:step in dB")
    r.set_defaults(func=cmd_ratesave)

    f = sub.add_parser("erf", help="effective receptive field map of the analysis transform")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--images", required=True, help="directory of .ppm images (centre-cropped)")
    f.add_argument("--size", type=int, default=512, help="crop side, a multiple of 16")
    f.add_argument("--out", required=True, help="comma-separated outputs, e.g. erf.pgm,erf.csv")
    f.add_argument(
        "--normalization",
        choices=("average-then-normalize", "normalize-then-average", "none"),
        default="average-then-normalize",
    )
    f.add_argument("--condition-grad", action="store_true", help="also differentiate through kernel generators")
    f.set_defaults(func=cmd_erf)

    m = sub.add_parser("macs", help="forward MACs of a configuration")
    m.add_argument("--config", help="key=value config file")
    m.add_argument("--res", default="768x512", help="WxH, multiples of 16")
    m.add_argument("--set", action="append", metavar="KEY=VALUE")
    m.add_argument("--detail", action="store_true", help="list every layer")
    m.set_defaults(func=cmd_macs)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    from llic._backend import CorruptStream
    from llic.checkpoint import CheckpointError
    from llic.entropy import FormatError
    from llic.ppm import PPMError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CorruptStream, CheckpointError, PPMError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
