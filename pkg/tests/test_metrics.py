import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llic.metrics import (
    RDCurve,
    RDPoint,
    bd_rate,
    min_side_for_ms_ssim,
    ms_ssim,
    ms_ssim_tensor,
    parse_grid,
    psnr,
    rate_saving_curve,
    read_curve_csv,
    write_curve_csv,
)
from llic.tensor import Tensor, backward, tape_scope
from oracles import bd_oracle, torch_ms_ssim


def curve(bpp, q):
    return RDCurve.from_arrays(bpp, q)


# ---------------------------------------------------------------- psnr


def test_psnr_examples():
    x = np.full((3, 8, 8), 0.5)
    assert psnr(x, x) == 100.0
    assert abs(psnr(x, x + 1 / 255) - 48.131) < 1e-3
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    with pytest.raises(ValueError):
        psnr(x, x[:, :4])


@given(st.integers(0, 2**31 - 1))
def test_psnr_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(2, 3, 6, 5))
    perm = rng.permutation(x.size)
    assert psnr(x, y) == pytest.approx(psnr(x.ravel()[perm], y.ravel()[perm]), abs=1e-12)


# ---------------------------------------------------------------- ms-ssim


def test_ms_ssim_identity_and_size_limit(rng):
    assert min_side_for_ms_ssim() == 160
    x = rng.uniform(size=(3, 161, 170))
    assert ms_ssim(x, x) == 1.0
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((3, 160, 200)), np.zeros((3, 160, 200)))


def test_ms_ssim_below_one_for_distortion(rng):
    x = rng.uniform(size=(3, 176, 176))
    y = np.clip(x + rng.normal(0, 0.01, x.shape), 0, 1)
    assert ms_ssim(x, y) < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ms_ssim_matches_torch_reference(seed):
    rng = np.random.default_rng(seed)
    h, w = 161 + 7 * seed, 190 - 5 * seed
    x = rng.uniform(size=(3, h, w))
    y = np.clip(x + rng.normal(0, 0.05 * (seed + 1), x.shape), 0, 1)
    assert abs(ms_ssim(x, y) - torch_ms_ssim(x, y)) < 1e-6


def test_differentiable_ms_ssim_agrees(rng):
    x = rng.uniform(size=(1, 3, 192, 192))
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    assert abs(float(ms_ssim_tensor(x, Tensor(y)).data) - ms_ssim(x[0], y[0])) < 1e-12


def test_differentiable_ms_ssim_gradient(rng):
    x = rng.uniform(size=(1, 1, 176, 176))
    y = Tensor(np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1))
    y.requires_grad = True
    with tape_scope():
        backward(ms_ssim_tensor(x, y))
    # spot-check a few coordinates by central differences
    # the score is ~1, so a wide step keeps rounding noise below the slope
    eps = 1e-3
    for idx in [(0, 0, 80, 80), (0, 0, 3, 150), (0, 0, 175, 0)]:
        base = y.data[idx]
        y.data[idx] = base + eps
        fp = float(ms_ssim_tensor(x, Tensor(y.data)).data)
        y.data[idx] = base - eps
        fm = float(ms_ssim_tensor(x, Tensor(y.data)).data)
        y.data[idx] = base
        num = (fp - fm) / (2 * eps)
        assert abs(num - y.grad[idx]) <= 1e-4 * abs(num) + 1e-11


# ---------------------------------------------------------------- BD-rate


ANCHOR = ([0.1, 0.25, 0.5, 1.0], [28.0, 31.0, 34.0, 37.0])


def test_bd_rate_identity_and_doubling():
    a = curve(*ANCHOR)
    assert bd_rate(a, a) == 0.0
    doubled = curve([2 * b for b in ANCHOR[0]], ANCHOR[1])
    assert abs(bd_rate(a, doubled) - 100.0) < 1e-6


@pytest.mark.parametrize(
    "test",
    [
        ([0.09, 0.22, 0.47, 0.93], [28.2, 31.1, 34.3, 37.4]),
        ([0.12, 0.3, 0.55, 1.2], [27.5, 30.5, 33.8, 36.6]),
        ([0.08, 0.2, 0.45, 0.88], [28.0, 31.5, 34.1, 37.2]),
    ],
)
def test_bd_rate_matches_quadrature_oracle(test):
    ours = bd_rate(curve(*ANCHOR), curve(*test))
    ref = bd_oracle(ANCHOR, test)
    assert abs(ours - ref) <= 0.01 * max(abs(ref), 1e-9) + 1e-9


@given(st.floats(-0.3, 0.3), st.floats(0.8, 1.2))
def test_bd_rate_reciprocal_identity(shift, stretch):
    q = np.array([27.0, 30.0, 33.0, 36.0, 39.0])
    r = 10 ** ((q - 30.0) / 12.0)
    a = curve(r, q)
    b = curve(r * 10**shift, 30 + (q - 30) * stretch)
    ab, ba = bd_rate(a, b), bd_rate(b, a)
    assert abs(ab - (-ba / (1 + ba / 100))) < 0.05


def test_bd_rate_order_invariance():
    pts = [RDPoint(b, q) for b, q in zip(*ANCHOR)]
    test = curve([0.09, 0.22, 0.47, 0.93], [28.2, 31.1, 34.3, 37.4])
    assert bd_rate(RDCurve(pts), test) == bd_rate(RDCurve(pts[::-1]), test)


def test_bd_rate_errors():
    a = curve(*ANCHOR)
    with pytest.raises(ValueError):
        bd_rate(a, curve([0.1, 0.2, 0.3], [28.0, 29.0, 30.0]))
    with pytest.raises(ValueError):
        bd_rate(a, curve([1, 2, 3, 4], [40.0, 41.0, 42.0, 43.0]))


def test_curve_validation():
    with pytest.raises(ValueError):
        RDCurve([RDPoint(0.0, 30.0)])
    with pytest.raises(ValueError):
        RDCurve([RDPoint(0.5, 30.0), RDPoint(0.5, 31.0)])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        RDCurve([RDPoint(0.1, 31.0), RDPoint(0.2, 30.0)])
    assert caught


def test_bd_rate_on_msssim():
    a = RDCurve(RDPoint(b, 30.0, m) for b, m in zip(ANCHOR[0], [0.90, 0.94, 0.97, 0.985]))
    assert bd_rate(a, a, "msssim") == 0.0
    with pytest.raises(ValueError):
        bd_rate(curve(*ANCHOR), curve(*ANCHOR), "msssim")


# ---------------------------------------------------------------- rate saving


def test_rate_saving_identity_and_knots():
    a = curve(*ANCHOR)
    assert all(s == 0.0 for _, s in rate_saving_curve(a, a, [28.0, 30.0, 37.0]))
    doubled = curve([2 * b for b in ANCHOR[0]], ANCHOR[1])
    for _, s in rate_saving_curve(a, doubled, ANCHOR[1]):
        assert abs(s - 100.0) < 1e-9


def test_rate_saving_sign_matches_bd():
    a = curve(*ANCHOR)
    cheaper = curve([0.8 * b for b in ANCHOR[0]], ANCHOR[1])
    savings = [s for _, s in rate_saving_curve(a, cheaper, parse_grid("28:37:0.5"))]
    assert np.allclose(savings, -20.0)
    assert bd_rate(a, cheaper) < 0


def test_rate_saving_refuses_extrapolation():
    with pytest.raises(ValueError):
        rate_saving_curve(curve(*ANCHOR), curve(*ANCHOR), [27.0])


def test_parse_grid():
    assert parse_grid("30:32:0.5").tolist() == [30.0, 30.5, 31.0, 31.5, 32.0]
    for bad in ("1:2", "3:1:1", "1:2:0", "a:b:c"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_csv_round_trip(tmp_path):
    pts = [RDPoint(0.1, 28.0, 0.9, 0), RDPoint(0.3, 31.0, None, 1)]
    write_curve_csv(pts, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "lambda_index,bpp,psnr,msssim"
    back = read_curve_csv(tmp_path / "c.csv")
    assert back.points == pts
