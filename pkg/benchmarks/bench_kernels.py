"""Compiled vs pure-Python kernels: depthwise conv and range coder.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Outputs of both backends are compared before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from llic import _kernels_py
from llic.entropy import gaussian_tables, scale_index

try:
    from llic import _kernels as _compiled
except ImportError:
    _compiled = None


def _cases(rng):
    x = rng.standard_normal((1, 32, 64, 64))
    k = rng.standard_normal((1, 32, 11, 11))
    g = rng.standard_normal((1, 32, 64, 64))
    tables = gaussian_tables()
    n = 20_000
    sigma = rng.uniform(0.2, 8.0, size=n)
    sym = np.rint(rng.standard_normal(n) * sigma).astype(np.int64)
    idx = scale_index(sigma).astype(np.int64)
    return x, k, g, tables, sym, idx


def _suite(mod, x, k, g, tables, sym, idx):
    t = (tables.cdfs, tables.offsets, tables.sizes, tables.halves)
    data = mod.rc_encode(sym, idx, *t)
    return {
        "dw_conv_forward 1x32x64x64 K=11": lambda: mod.dw_conv_forward(x, k, 5),
        "dw_conv_backward 1x32x64x64 K=11": lambda: mod.dw_conv_backward(g, x, k, 5),
        "rc_encode 20k symbols": lambda: mod.rc_encode(sym, idx, *t),
        "rc_decode 20k symbols": lambda: mod.rc_decode(data, idx, *t),
    }


def _agree(a, b) -> bool:
    """Coder output must match byte for byte; float kernels up to summation order."""
    if isinstance(a, bytes):
        return a == b
    if isinstance(a, tuple):
        return all(_agree(u, v) for u, v in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind in "iu":
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-10, atol=1e-10 * np.abs(a).max())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    case = _cases(rng)
    py = _suite(_kernels_py, *case)
    if _compiled is None:
        print("compiled extension not built; timing the Python backend only")
    else:
        c = _suite(_compiled, *case)
        for name in py:
            if not _agree(py[name](), c[name]()):
                raise SystemExit(f"backends disagree on {name}")

    print(f"{'kernel':<36s} {'python ms':>11s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in py.items():
        tp = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if _compiled is None:
            print(f"{name:<36s} {tp:11.2f} {'-':>12s} {'-':>8s}")
            continue
        tc = min(timeit.repeat(c[name], number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<36s} {tp:11.2f} {tc:12.2f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
