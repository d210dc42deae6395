import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llic.likelihood import (
    LIKELIHOOD_FLOOR,
    SIGMA_MIN,
    bits,
    factorized_likelihood,
    gaussian_likelihood,
    gaussian_pmf,
    quantize,
)
from llic.model import (
    MIN_PADDED,
    LLICModel,
    ModelConfig,
    pad_image,
    padded_size,
    reconstruct,
)
from llic.tensor import Param, Tensor, add, backward, grad_check, reduce, tape_scope


def mp_bin(delta, sigma):
    phi = lambda u: (1 + mpmath.erf(u / mpmath.sqrt(2))) / 2  # noqa: E731
    return float(phi(mpmath.mpf(delta + 0.5) / sigma) - phi(mpmath.mpf(delta - 0.5) / sigma))


@pytest.fixture(scope="module")
def desk():
    return LLICModel(ModelConfig.desk_scale(), seed=0)


def test_likelihood_unit_bin():
    assert abs(gaussian_likelihood(Tensor([0.0]), Tensor([1.0])).data[0] - 0.382925) < 1e-6
    assert abs(mp_bin(0, 1) - 0.382925) < 1e-6


def test_likelihood_wide_and_floor():
    assert gaussian_likelihood(Tensor([0.0]), Tensor([100.0])).data[0] < 0.01
    assert gaussian_likelihood(Tensor([1e6]), Tensor([0.11])).data[0] == LIKELIHOOD_FLOOR


@given(st.integers(-40, 40), st.floats(0.11, 64))
def test_likelihood_matches_high_precision(delta, sigma):
    ours = gaussian_pmf(delta, sigma)
    ref = mp_bin(delta, sigma)
    assert abs(ours - ref) <= 1e-15 + 1e-9 * ref


@given(st.floats(0.11, 64), st.floats(-3, 3))
def test_factorized_mass_sums_to_one(scale, loc):
    L = int(np.ceil(12 * scale + abs(loc))) + 2
    z = Tensor(np.arange(-L, L + 1, dtype=np.float64).reshape(1, 1, 1, -1))
    p = factorized_likelihood(z, Tensor([loc]), Tensor([scale])).data
    assert abs(p.sum() - 1.0) < 1e-6


def test_factorized_unit_case():
    p = factorized_likelihood(Tensor(np.zeros((1, 1, 1, 1))), Tensor([0.0]), Tensor([1.0]))
    assert abs(p.data.item() - 0.382925) < 1e-6


def test_likelihood_gradients(rng):
    delta = Tensor(rng.uniform(-3, 3, size=(1, 4, 3, 3)))
    sigma = Tensor(rng.uniform(0.3, 3, size=(1, 4, 3, 3)))
    assert grad_check(lambda t: gaussian_likelihood(t, sigma), delta) < 1e-5
    assert grad_check(lambda t: gaussian_likelihood(delta, t), sigma) < 1e-5


@given(st.integers(0, 2**31 - 1))
def test_wider_sigma_lowers_peak(seed):
    sigma = np.random.default_rng(seed).uniform(0.11, 25, size=50)
    assert np.all(gaussian_pmf(0.0, 10 * sigma) < gaussian_pmf(0.0, sigma))


def test_quantize_modes(rng):
    mu = Tensor(rng.standard_normal(5))
    assert np.array_equal(quantize(mu, mu, "round").data, mu.data)
    assert quantize(Tensor([0.6]), Tensor([0.0]), "round").data[0] == 1.0
    with pytest.raises(ValueError):
        quantize(mu, mu, "floor")
    with pytest.raises(ValueError):
        quantize(mu, None, "noise")


def test_noise_statistics():
    y = Tensor(np.zeros(10**6))
    out = quantize(y, None, "noise", np.random.default_rng(0)).data
    assert np.abs(out).max() <= 0.5
    assert abs(out.mean()) < 3 * np.sqrt(1 / 12) / np.sqrt(out.size)


def test_ste_gradient_is_identity():
    y = Param([0.3, 1.7])
    mu = Tensor([0.1, 0.1])
    with tape_scope():
        out = quantize(y, mu, "ste")
        backward(reduce("sum", out))
    assert np.allclose(out.data, [0.1, 2.1])
    assert y.grad.tolist() == [1.0, 1.0]


def test_bits_of_certain_symbol():
    assert bits(Tensor([1.0, 1.0])).data == 0.0
    assert abs(bits(Tensor([0.5, 0.25])).data - 3.0) < 1e-12


# ---------------------------------------------------------------- model


def test_config_validation_and_digest():
    a = ModelConfig.desk_scale()
    assert (a.N, a.M) == (32, 48)
    assert a.kernels == ModelConfig().kernels and a.blocks_per_stage == ModelConfig().blocks_per_stage
    assert a.digest() == ModelConfig.desk_scale().digest()
    assert a.digest() != ModelConfig.desk_scale(N=16).digest()
    with pytest.raises(ValueError):
        ModelConfig(N=0)
    with pytest.raises(ValueError):
        ModelConfig(kernels=(11, 10, 9, 9))
    assert ModelConfig.from_mapping({"N": "8", "kernels": "3,3,3,3", "unknown": "1"}).kernels == (3, 3, 3, 3)


@pytest.mark.parametrize("h,w", [(1, 1), (37, 64), (64, 64), (511, 768), (33, 100)])
def test_padding(h, w):
    ph, pw = padded_size(h, w)
    assert ph % 16 == 0 and pw % 16 == 0 and ph >= max(h, MIN_PADDED) and pw >= max(w, MIN_PADDED)
    x = np.random.default_rng(0).uniform(size=(1, 3, h, w))
    xp = pad_image(x)
    assert xp.shape[2:] == (ph, pw)
    assert np.array_equal(xp[..., :h, :w], x)
    assert np.array_equal(xp[..., -1, -1], x[..., -1, -1])


def test_shapes_desk(desk):
    x = Tensor(np.random.default_rng(1).uniform(size=(1, 3, 64, 64)))
    y = desk.g_a(x)
    assert y.shape == (1, 48, 4, 4)
    assert desk.g_s(y).shape == (1, 3, 64, 64)
    z = desk.h_a(y)
    assert z.shape == (1, 32, 1, 1)
    gp = desk.h_s(z, y.shape[2:])
    assert gp.mu.shape == y.shape and gp.sigma.shape == y.shape
    assert gp.sigma.data.min() >= SIGMA_MIN


def test_shapes_full_config():
    model = LLICModel(ModelConfig(), seed=0)
    recs, _ = model.macs(256, 256)
    shapes = {r.path: r.out_shape for r in recs}
    assert shapes["g_a.stage3.down.conv"] == (320, 16, 16)
    assert shapes["h_a.conv2"] == (192, 4, 4)
    assert shapes["h_s.conv2"] == (640, 16, 16)


def test_analysis_rejects_unpadded(desk):
    with pytest.raises(ValueError):
        desk.g_a(Tensor(np.zeros((1, 3, 40, 40))))


def test_sigma_floor_for_random_params(rng):
    model = LLICModel(ModelConfig.desk_scale(), seed=3)
    for _, p in model.h_s.named_params():
        p.data[...] = rng.standard_normal(p.shape) * 5
    z = Tensor(rng.standard_normal((1, 32, 2, 2)) * 10)
    assert model.h_s(z, (8, 8)).sigma.data.min() >= SIGMA_MIN


def test_zero_synthesis_gives_zero():
    model = LLICModel(ModelConfig.desk_scale(), seed=0)
    for _, p in model.g_s.named_params():
        p.data[...] = 0.0
    assert np.array_equal(model.g_s(Tensor(np.zeros((1, 48, 3, 3)))).data, np.zeros((1, 3, 48, 48)))


def test_eval_determinism_and_bits(desk):
    x = np.random.default_rng(2).uniform(size=(1, 3, 64, 64))
    a, b = desk(x, mode="eval"), desk(x, mode="eval")
    assert np.array_equal(a.x_hat.data, b.x_hat.data)
    assert a.total_bits == b.total_bits
    assert float(a.bits_y.data) >= 0 and float(a.bits_z.data) >= 0
    assert a.x_hat.data.min() >= 0 and a.x_hat.data.max() <= 1


def test_train_differs_from_eval(desk):
    x = np.random.default_rng(2).uniform(size=(1, 3, 64, 64))
    tr = desk(x, mode="train", rng=np.random.default_rng(0))
    ev = desk(x, mode="eval")
    assert not np.array_equal(tr.x_hat.data, ev.x_hat.data)
    with pytest.raises(ValueError):
        desk(x, mode="train")


def test_reconstruct_crops(desk):
    x = np.random.default_rng(3).uniform(size=(1, 3, 37, 50))
    rec, total = reconstruct(desk, x)
    assert rec.shape == x.shape and total > 0


def test_synthesis_grad_check_tiny():
    cfg = ModelConfig(N=4, M=4, kernels=(3, 3, 3, 3), synthesis_kernels=(3, 3, 3, 3), hyper_width=4)
    model = LLICModel(cfg, seed=0)
    y = Tensor(np.random.default_rng(0).standard_normal((1, 4, 3, 3)))
    assert grad_check(model.g_s, y) < 1e-5


def test_rate_gradient_reaches_all_params(desk):
    x = np.random.default_rng(4).uniform(size=(1, 3, 64, 64))
    named = list(desk.named_params())
    for _, p in named:
        p.grad = None
    with tape_scope():
        out = desk(x, mode="train", rng=np.random.default_rng(1))
        backward(add(out.bits_y, out.bits_z))
    missing = [n for n, p in named if p.grad is None and not n.startswith("g_s")]
    assert not missing
