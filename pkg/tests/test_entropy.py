import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from llic import _backend, _kernels_py
from llic.entropy import (
    HEADER_SIZE,
    NUM_SCALES,
    SCALES,
    TOTAL,
    Bitstream,
    CdfTable,
    CorruptStream,
    FormatError,
    TableSet,
    alphabet_bound,
    build_cdf,
    decode_image,
    encode_image,
    gaussian_tables,
    hyper_tables,
    quantize_pmf,
    scale_index,
)
from llic.likelihood import gaussian_pmf
from llic.model import LLICModel, ModelConfig, pad_image
from llic.tensor import no_grad


def flat_table(freqs, L):
    freqs = np.asarray(freqs, dtype=np.int64)
    assert freqs.sum() == TOTAL and freqs.size == 2 * L + 2
    return CdfTable(np.concatenate([[0], np.cumsum(freqs)]), L)


@pytest.fixture(scope="module")
def desk():
    return LLICModel(ModelConfig.desk_scale(), seed=0)


def test_scale_table_endpoints():
    assert SCALES.size == NUM_SCALES
    assert SCALES[0] == 0.11 and SCALES[-1] == 256.0
    assert np.all(np.diff(np.log(SCALES)) > 0)
    assert np.allclose(np.diff(np.log(SCALES)), np.log(256 / 0.11) / 63)
    assert scale_index(0.11) == 0 and scale_index(256.0) == 63
    assert scale_index(1e-3) == 0 and scale_index(1e6) == 63


@given(st.floats(0.11, 256))
def test_scale_index_picks_smallest_cover(sigma):
    i = int(scale_index(sigma))
    assert SCALES[i] >= sigma
    assert i == 0 or SCALES[i - 1] < sigma


@pytest.mark.parametrize("scale", list(SCALES[::7]) + [SCALES[-1]])
def test_alphabet_bound_tail(scale):
    L = alphabet_bound(scale)
    tail = ndtr(-(L + 0.5) / scale)
    assert tail < 2.0**-17
    if L > 0:
        assert ndtr(-(L - 0.5) / scale) >= 2.0**-17


def test_all_gaussian_tables_valid_and_close():
    tables = gaussian_tables()
    worst = 0.0
    for t, s in enumerate(SCALES):
        o, n, L = tables.offsets[t], tables.sizes[t], tables.halves[t]
        cdf = tables.cdfs[o : o + n + 1]
        assert cdf[0] == 0 and cdf[-1] == TOTAL and np.all(np.diff(cdf) >= 1)
        assert n == 2 * L + 2
        pmf = np.diff(cdf)[:-1] / TOTAL
        ref = gaussian_pmf(np.arange(-L, L + 1), s)
        worst = max(worst, np.abs(pmf - np.maximum(ref, 1e-9)).max())
    assert worst <= 2.0**-16 + 1e-9


@given(st.lists(st.floats(0, 1), min_size=1, max_size=300))
def test_quantize_pmf_properties(raw):
    p = np.asarray(raw)
    p = p / p.sum() if p.sum() > 0 else np.full(p.size, 1 / p.size)
    freq = quantize_pmf(p)
    assert freq.sum() == TOTAL and freq.min() >= 1 and freq.size == p.size + 1


def test_quantize_pmf_shaves_when_crowded():
    freq = quantize_pmf(np.full(70000, 1 / 70000)[:65535])
    assert freq.sum() == TOTAL and freq.min() == 1


def test_build_cdf_with_offset():
    t = build_cdf(1.5, 0.3)
    assert t.cdf[0] == 0 and t.cdf[-1] == TOTAL and np.all(np.diff(t.cdf) >= 1)


def roundtrip(tables, sym, idx):
    data = tables.encode(sym, idx)
    return data, tables.decode(data, idx)


def test_empty_stream():
    tables = gaussian_tables()
    data, back = roundtrip(tables, np.zeros(0, np.int64), np.zeros(0, np.int64))
    assert len(data) <= 8 and back.size == 0


def test_uniform_alphabet_payload():
    tables = TableSet.from_tables([flat_table(np.full(256, 256), 127)])
    sym = np.random.default_rng(0).integers(-127, 128, size=4096)
    data, back = roundtrip(tables, sym, np.zeros(4096, np.int64))
    assert np.array_equal(back, sym)
    assert 4096 <= len(data) <= 4096 + 16


def test_near_deterministic_payload():
    tables = TableSet.from_tables([flat_table([65535, 1], 0)])
    sym = np.zeros(10**5, np.int64)
    data, back = roundtrip(tables, sym, np.zeros(sym.size, np.int64))
    assert np.array_equal(back, sym)
    assert len(data) < 50


@given(
    st.lists(st.integers(-(2**31), 2**31), min_size=1, max_size=200),
    st.integers(0, 2**31 - 1),
)
def test_roundtrip_with_escapes(values, seed):
    rng = np.random.default_rng(seed)
    sym = np.asarray(values, dtype=np.int64)
    idx = rng.integers(0, NUM_SCALES, size=sym.size)
    _, back = roundtrip(gaussian_tables(), sym, idx)
    assert np.array_equal(back, sym)


def test_escape_extremes():
    sym = np.array([2**31, -(2**31), 0, 1, -1, 32768, -32769], dtype=np.int64)
    _, back = roundtrip(gaussian_tables(), sym, np.zeros(sym.size, np.int64))
    assert np.array_equal(back, sym)
    with pytest.raises(ValueError):
        gaussian_tables().encode(np.array([2**40]), np.zeros(1, np.int64))


def test_coded_length_near_entropy():
    rng = np.random.default_rng(5)
    tables = gaussian_tables()
    n = 20000
    sigma = rng.uniform(0.11, 40, size=n)
    sym = np.rint(rng.standard_normal(n) * sigma).astype(np.int64)
    idx = scale_index(sigma)
    data = tables.encode(sym, idx)
    ideal = tables.code_length_bits(sym, idx) / 8
    assert len(data) <= 1.01 * ideal + 16


def test_corrupt_streams_raise():
    tables = gaussian_tables()
    rng = np.random.default_rng(6)
    idx = rng.integers(0, 10, size=500)
    sym = np.rint(rng.standard_normal(500) * 30).astype(np.int64)
    data = tables.encode(sym, idx)
    with pytest.raises(CorruptStream):
        tables.decode(data[: len(data) // 3], idx)
    with pytest.raises(CorruptStream):
        tables.decode(data + bytes(64), idx)


def test_backends_produce_identical_bytes():
    if not _backend.COMPILED:
        pytest.skip("compiled kernels not built")
    from llic import _kernels

    tables = gaussian_tables()
    rng = np.random.default_rng(7)
    idx = rng.integers(0, NUM_SCALES, size=3000).astype(np.int64)
    sym = np.rint(rng.standard_normal(3000) * 50).astype(np.int64)
    sym[::50] = 10**7
    args = (tables.cdfs, tables.offsets, tables.sizes, tables.halves)
    a = _kernels.rc_encode(sym, idx, *args)
    b = _kernels_py.rc_encode(sym, idx, *args)
    assert a == b
    assert np.array_equal(_kernels_py.rc_decode(a, idx, *args), sym)


# ---------------------------------------------------------------- bitstream and image codec


def test_header_layout_and_bpp():
    bs = Bitstream(64, 64, 64, 64, b"", b"")
    raw = bs.to_bytes()
    assert len(raw) == HEADER_SIZE == 22
    assert raw[:4] == b"LLIC"
    assert abs(bs.bpp() - 22 * 8 / 4096) < 1e-12
    assert Bitstream.from_bytes(raw) == bs


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XLIC" + b[4:],
        lambda b: b[:4] + bytes([9]) + b[5:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:10],
        lambda b: b[:6] + (100).to_bytes(2, "little") + b[8:],
    ],
    ids=["magic", "version", "short", "long", "truncated_header", "dims"],
)
def test_header_validation(mutate, desk):
    raw = encode_image(np.zeros((3, 20, 20)), desk).stream.to_bytes()
    with pytest.raises(FormatError):
        decode_image(mutate(raw), desk)


def test_lambda_index_mismatch(desk):
    raw = encode_image(np.zeros((3, 20, 20)), desk, lambda_index=2).stream.to_bytes()
    with pytest.raises(FormatError):
        decode_image(raw, desk, lambda_index=3)
    assert decode_image(raw, desk, lambda_index=2).x_hat.shape == (3, 20, 20)


@pytest.mark.parametrize("h,w", [(37, 64), (64, 64), (17, 90)])
def test_image_roundtrip(h, w, desk):
    x = np.random.default_rng(h * w).uniform(size=(3, h, w))
    enc = encode_image(x, desk)
    dec = decode_image(enc.stream.to_bytes(), desk)
    assert dec.x_hat.shape == x.shape
    assert np.array_equal(dec.y_hat, enc.y_hat)
    assert np.array_equal(dec.z_hat, enc.z_hat)
    assert dec.x_hat.min() >= 0 and dec.x_hat.max() <= 1


def test_decoder_matches_eval_forward(desk):
    x = np.random.default_rng(8).uniform(size=(3, 64, 64))
    enc = encode_image(x, desk)
    with no_grad():
        out = desk(pad_image(x[None]), mode="eval")
    assert np.array_equal(out.y_hat.data, enc.y_hat)


def test_hyper_tables_cover_prior(desk):
    tables, shift = hyper_tables(desk)
    assert tables.sizes.size == desk.config.hyper and shift.shape == (desk.config.hyper,)


@pytest.mark.parametrize("seed", range(5))
def test_estimate_brackets_actual(seed, desk):
    x = np.random.default_rng(100 + seed).uniform(size=(3, 64, 64))
    with no_grad():
        est = desk(pad_image(x[None]), mode="eval").total_bits
    stream = encode_image(x, desk).stream
    actual = 8 * (len(stream.z_payload) + len(stream.y_payload))
    assert est - 16 <= actual <= 1.01 * est + 512
