import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebwm.data import (
    ContinuousSpec,
    SequenceBatch,
    ar1_latents,
    batch_text,
    copy_baseline_score,
    detokenize_bytes,
    gen_continuous,
    load_corpus,
    mixing_matrix,
    read_continuous_fixture,
    synthetic_corpus,
    tokenize_bytes,
    unigram_entropy,
    write_continuous_fixture,
)

# -- continuous sequences -----------------------------------------------------------


def test_gamma_one_gives_constant_sequences():
    batch = gen_continuous(ContinuousSpec(gamma=1.0, batch=4, length=6, feature_dim=3, seed=1))
    assert np.all(batch.data == batch.data[:, :1])
    assert copy_baseline_score(batch) == 0.0


def test_gamma_zero_is_white_noise_with_unit_variance():
    u = ar1_latents(4000, 8, 4, 0.0, np.random.default_rng(0))
    assert np.var(u) == pytest.approx(1.0, abs=0.02)
    lag = np.mean(u[:, 1:] * u[:, :-1])
    assert abs(lag) < 0.02


def test_copy_mse_matches_two_times_one_minus_gamma():
    batch = gen_continuous(ContinuousSpec(gamma=0.9, batch=2000, length=16, feature_dim=16, seed=2))
    mse = np.mean((batch.targets - batch.context) ** 2)
    assert mse == pytest.approx(0.2, rel=0.05)


@settings(max_examples=15, deadline=None)
@given(gamma=st.floats(0.0, 0.99), seed=st.integers(0, 2**31 - 1))
def test_latents_are_stationary(gamma, seed):
    u = ar1_latents(1000, 12, 4, gamma, np.random.default_rng(seed))
    for t in (0, 11):
        assert 0.9 <= np.var(u[:, t]) <= 1.1


@pytest.mark.parametrize("dim", [1, 4, 16])
def test_mixing_matrix_is_orthogonal(dim):
    q = mixing_matrix(dim, 7)
    np.testing.assert_allclose(q @ q.T, np.eye(dim), atol=1e-12)


def test_orthogonal_mixing_preserves_copy_error():
    spec = dict(gamma=0.9, batch=64, length=10, feature_dim=8, seed=3)
    mixed, u = gen_continuous(ContinuousSpec(mixing="orthogonal", **spec), return_latents=True)
    plain = gen_continuous(ContinuousSpec(mixing="none", **spec))
    np.testing.assert_array_equal(plain.data, u)
    d_mixed = mixed.targets - mixed.context
    d_plain = plain.targets - plain.context
    np.testing.assert_allclose(np.linalg.norm(d_mixed, axis=-1), np.linalg.norm(d_plain, axis=-1), atol=1e-9)


def test_generation_is_seeded():
    a = gen_continuous(ContinuousSpec(seed=5)).data
    b = gen_continuous(ContinuousSpec(seed=5)).data
    c = gen_continuous(ContinuousSpec(seed=6)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kwargs", [dict(gamma=1.5), dict(gamma=-0.1), dict(mixing="rotation")])
def test_invalid_continuous_spec(kwargs):
    with pytest.raises(ValueError):
        ContinuousSpec(**kwargs)


def test_batch_layout():
    batch = gen_continuous(ContinuousSpec(batch=3, length=5, feature_dim=2))
    assert batch.data.shape == (3, 6, 2)
    assert batch.context.shape == batch.targets.shape == (3, 5, 2)
    assert np.array_equal(batch.targets[:, :-1], batch.context[:, 1:])
    assert batch.length == 5 and batch.batch_size == 3


@pytest.mark.parametrize(
    "mode, data",
    [
        ("continuous", np.zeros((2, 3))),
        ("continuous", np.full((1, 2, 2), np.nan)),
        ("discrete", np.array([[0, 256]])),
        ("discrete", np.array([[-1, 3]])),
        ("image", np.zeros((1, 2))),
    ],
)
def test_invalid_batches(mode, data):
    with pytest.raises(ValueError):
        SequenceBatch(mode, data)


def test_copy_baseline_rejects_discrete():
    with pytest.raises(ValueError):
        copy_baseline_score(SequenceBatch("discrete", np.zeros((1, 3), int)))


# -- bytes ---------------------------------------------------------------------------


def test_tokenize_examples():
    assert tokenize_bytes("AB").tolist() == [65, 66]
    assert tokenize_bytes("").tolist() == []
    assert tokenize_bytes("é").tolist() == [0xC3, 0xA9]


@given(st.binary(max_size=200))
def test_byte_round_trip(raw):
    ids = tokenize_bytes(raw)
    assert ids.min(initial=0) >= 0 and ids.max(initial=0) < 256
    assert detokenize_bytes(ids) == raw


def test_shortest_corpus_gives_two_windows():
    corpus = np.arange(10)
    seen = {tuple(batch_text(corpus, 8, 1, s).data[0]) for s in range(50)}
    assert seen == {tuple(range(9)), tuple(range(1, 10))}


def test_text_batches_are_seeded_windows():
    corpus = tokenize_bytes(synthetic_corpus(5000, seed=1))
    a = batch_text(corpus, 16, 4, 9)
    b = batch_text(corpus, 16, 4, 9)
    assert np.array_equal(a.data, b.data)
    assert a.data.shape == (4, 17)
    windows = np.lib.stride_tricks.sliding_window_view(corpus, 17)
    for row in a.data:
        assert (windows == row).all(axis=1).any()


def test_short_corpus_raises():
    with pytest.raises(ValueError):
        batch_text(np.arange(9), 8, 1, 0)


def test_synthetic_corpus_is_deterministic_text():
    a = synthetic_corpus(20_000, seed=4)
    assert a == synthetic_corpus(20_000, seed=4)
    assert a != synthetic_corpus(20_000, seed=5)
    assert len(a) == 20_000
    a.decode("ascii")


def test_unigram_entropy():
    assert unigram_entropy(np.zeros(10, int)) == 0.0
    assert unigram_entropy(np.arange(256)) == pytest.approx(np.log(256))
    assert unigram_entropy(np.array([0, 1])) == pytest.approx(np.log(2))
    h = unigram_entropy(tokenize_bytes(synthetic_corpus(200_000, seed=33)))
    assert 2.0 < h < np.log(256)


def test_load_corpus(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(b"hello")
    assert load_corpus(path).tolist() == list(b"hello")


# -- fixtures --------------------------------------------------------------------------


def test_continuous_fixture_round_trip(tmp_path):
    batch = gen_continuous(ContinuousSpec(batch=3, length=4, feature_dim=5, seed=8))
    path = tmp_path / "x.bin"
    write_continuous_fixture(path, batch, 0.9, 8)
    back, gamma, seed = read_continuous_fixture(path)
    assert (gamma, seed) == (0.9, 8)
    np.testing.assert_array_equal(back.data, batch.data.astype(np.float32))


def test_fixture_rejects_wrong_magic(tmp_path):
    path = tmp_path / "x.bin"
    write_continuous_fixture(path, gen_continuous(ContinuousSpec(batch=1, length=2, feature_dim=2)), 0.5, 0)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        read_continuous_fixture(path)
