from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llic.checkpoint import TrainState, load_checkpoint, save_checkpoint
from llic.model import LLICModel, ModelConfig
from llic.samples import synthetic_image
from llic.tensor import Param, Tensor, grad_check
from llic.train import (
    MSE_LAMBDAS,
    MissingGradient,
    TrainConfig,
    adam_step,
    configs_from_mapping,
    load_config_file,
    lr_schedule,
    patch_size_at,
    rd_loss,
    resume,
    sample_patch,
    train,
)

TINY = ModelConfig(N=4, M=4, kernels=(3, 3, 3, 3), synthesis_kernels=(3, 3, 3, 3), hyper_width=4)


def tiny_cfg(**kw):
    base = dict(total_steps=6, batch_size=2, patch_size=48, large_patch_size=48, lr_milestones=(), lr_values=())
    return TrainConfig(**{**base, **kw})


def fake_out(x_hat, bits_y=0.0, bits_z=0.0):
    return SimpleNamespace(x_hat=x_hat, bits_y=Tensor(bits_y), bits_z=Tensor(bits_z))


# ---------------------------------------------------------------- schedule and config


def test_lr_schedule_milestones():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(1_699_999, cfg) == 1e-4
    assert lr_schedule(1_750_000, cfg) == 3e-5
    assert lr_schedule(1_850_000, cfg) == 1e-5
    assert lr_schedule(1_920_000, cfg) == 3e-6
    assert lr_schedule(1_999_999, cfg) == 1e-6
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_lr_schedule_scales_with_total_steps():
    cfg = TrainConfig(total_steps=2000)
    assert lr_schedule(1699, cfg) == 1e-4 and lr_schedule(1700, cfg) == 3e-5


@given(st.integers(0, 10**6), st.integers(1, 10**6))
def test_lr_schedule_monotone(a, total):
    cfg = TrainConfig(total_steps=total)
    b = a + 17
    assert lr_schedule(b, cfg) <= lr_schedule(a, cfg)


def test_train_config_validation():
    assert TrainConfig().batch_size == 16
    assert MSE_LAMBDAS == (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
    assert TrainConfig(lmbda=0.0483).lambda_index == 5
    assert TrainConfig(lmbda=0.02).lambda_index == 255
    bad_cases = (
        dict(lmbda=0),
        dict(lmbda=-1),
        dict(lr_milestones=(0.9, 0.8), lr_values=(1, 2)),
        dict(distortion="l1"),
        dict(patch_size=32),
        dict(large_patch_size=200),
    )
    for bad in bad_cases:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\npreset=desk\nlmbda=0.0483\nbatch_size=1\nkernels=3,3,3,3\n")
    model_cfg, train_cfg = load_config_file(path)
    assert (model_cfg.N, model_cfg.M, model_cfg.kernels) == (32, 48, (3, 3, 3, 3))
    assert train_cfg.lmbda == 0.0483 and train_cfg.batch_size == 1
    with pytest.raises(ValueError):
        configs_from_mapping({"nonsense": "1"})
    with pytest.raises(ValueError):
        configs_from_mapping({"preset": "huge"})


def test_canonical_round_trip():
    cfg = tiny_cfg(lmbda=0.0067, seed=9)
    from llic.checkpoint import parse_key_values

    assert TrainConfig.from_mapping(parse_key_values(cfg.canonical())) == cfg


# ---------------------------------------------------------------- patches


def test_patch_curriculum():
    cfg = TrainConfig(total_steps=1000)
    assert patch_size_at(0, cfg) == 256 and patch_size_at(599, cfg) == 256
    assert patch_size_at(600, cfg) == 512


@given(st.integers(1, 70), st.integers(1, 70), st.integers(0, 2**31 - 1))
def test_sample_patch_is_a_crop(h, w, seed):
    img = np.random.default_rng(seed).uniform(size=(3, h, w))
    cfg = tiny_cfg(patch_size=48, large_patch_size=48)
    patch = sample_patch(img, 0, cfg, np.random.default_rng(seed))
    assert patch.shape == (3, 48, 48)
    src = np.pad(img, ((0, 0), (0, max(0, 48 - h)), (0, max(0, 48 - w))), mode="edge")
    H, W = src.shape[1:]
    hits = [
        (t, l)
        for t in range(H - 47)
        for l in range(W - 47)
        if np.array_equal(src[:, t : t + 48, l : l + 48], patch)
    ]
    assert hits


def test_sample_patch_covers_offsets():
    img = np.arange(3 * 50 * 50, dtype=float).reshape(3, 50, 50)
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    corners = {sample_patch(img, 0, cfg, rng)[0, 0, 0] for _ in range(400)}
    assert corners == {img[0, t, l] for t in range(3) for l in range(3)}


# ---------------------------------------------------------------- loss


def test_rd_loss_examples():
    x = np.full((1, 3, 4, 4), 0.5)
    loss, r, d = rd_loss(x, fake_out(Tensor(x.copy())), 0.01)
    assert float(loss.data) == 0.0 and r == 0.0 and d == 0.0
    _, _, d = rd_loss(x, fake_out(Tensor(x + 1 / 255)), 0.01)
    assert abs(d - 1.0) < 1e-9
    loss, r, _ = rd_loss(x, fake_out(Tensor(x.copy()), 32.0, 16.0), 0.01)
    assert r == 3.0 and float(loss.data) == 3.0


def test_rd_loss_gradient(rng):
    x = rng.uniform(size=(1, 3, 4, 4))
    x_hat = Tensor(rng.uniform(size=x.shape))
    assert grad_check(lambda t: rd_loss(x, fake_out(t, 5.0), 0.0130)[0], x_hat) < 1e-5


def test_rd_loss_msssim_mode(rng):
    x = rng.uniform(size=(1, 3, 176, 176))
    loss, _, d = rd_loss(x, fake_out(Tensor(x.copy())), 8.73, "msssim")
    assert abs(d) < 1e-12
    with pytest.raises(ValueError):
        rd_loss(x, fake_out(Tensor(x)), 1.0, "l1")


# ---------------------------------------------------------------- adam


def test_adam_zero_grad_keeps_params():
    p = Param(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step([("p", p)], TrainState(), 1e-3)
    assert p.data.tolist() == [1.0, -2.0]
    assert p.grad is None


@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-6), st.floats(1e-6, 1e-1))
def test_adam_first_step_closed_form(g, lr):
    p = Param(np.array([0.25]))
    p.grad = np.array([g])
    adam_step([("p", p)], TrainState(), lr)
    # after bias correction m_hat = g and v_hat = g^2
    expected = 0.25 - lr * g / (abs(g) + 1e-8)
    assert abs(p.data[0] - expected) <= 1e-15


def test_adam_missing_gradient():
    p = Param(np.zeros(2))
    with pytest.raises(MissingGradient):
        adam_step([("p", p)], TrainState(), 1e-3)


def test_adam_moments_accumulate():
    p = Param(np.zeros(3))
    state = TrainState()
    for _ in range(3):
        p.grad = np.ones(3)
        adam_step([("p", p)], state, 1e-2)
    assert state.step == 3
    assert np.allclose(state.m["p"], 1 - 0.9**3)
    assert np.allclose(p.data, -0.03)


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def images():
    return [synthetic_image(40, 52, seed=1), synthetic_image(64, 48, seed=2)]


def run(images, steps=6, **kw):
    model = LLICModel(TINY, seed=0)
    state, logs = train(model, images, tiny_cfg(**kw), steps=steps)
    return model, state, logs


def test_short_runs_are_deterministic(images):
    m1, s1, l1 = run(images)
    m2, s2, l2 = run(images)
    assert [e.loss for e in l1] == [e.loss for e in l2]
    for (n, a), (_, b) in zip(m1.named_params(), m2.named_params()):
        assert np.array_equal(a.data, b.data), n
    assert s1.step == 6 and len(l1) == 6
    _, _, l3 = run(images, seed=1)
    assert [e.loss for e in l3] != [e.loss for e in l1]


def test_resume_matches_uninterrupted(images, tmp_path):
    full, _, _ = run(images)
    model = LLICModel(TINY, seed=0)
    cfg = tiny_cfg()
    state, _ = train(model, images, cfg, steps=3)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, model, state, cfg.canonical(), cfg.lambda_index)
    resumed, cfg2, state2, logs = resume(path, images)
    assert cfg2 == cfg and state2.step == 6 and [e.step for e in logs] == [3, 4, 5]
    for (n, a), (_, b) in zip(full.named_params(), resumed.named_params()):
        assert np.array_equal(a.data, b.data), n


def test_periodic_checkpoints(images, tmp_path):
    model = LLICModel(TINY, seed=0)
    path = tmp_path / "run.ckpt"
    train(model, images, tiny_cfg(checkpoint_every=2), steps=4, checkpoint_path=path)
    assert load_checkpoint(path).state.step == 4


def test_train_rejects_empty_data():
    with pytest.raises(ValueError):
        train(LLICModel(TINY, seed=0), [], tiny_cfg())
