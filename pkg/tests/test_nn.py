import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from reference import baseline_stack, rotate

from ebwm import autodiff as ad
from ebwm.autodiff import ShapeError, Tensor
from ebwm.nn import (
    ARTransformer,
    ContextOverflowError,
    ModelConfig,
    attend_causal,
    block_forward,
    block_param_count,
    causal_attention,
    load_checkpoint,
    param_count,
    rotary_positions,
    save_checkpoint,
)


def _params(cfg, seed=0):
    return ARTransformer(cfg, seed=seed).params


# -- config -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(d_model=10, n_heads=4),
        dict(d_model=12, n_heads=4),  # odd head dim
        dict(mode="discrete", vocab_size=None, feature_dim=None),
        dict(mode="discrete", vocab_size=256),  # feature_dim still set
        dict(mode="continuous", feature_dim=None),
        dict(mode="image"),
    ],
)
def test_invalid_model_configs(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_ffn_hidden_rounds_to_multiple_of_eight():
    assert ModelConfig(d_model=64).ffn_hidden == 176
    assert ModelConfig(d_model=768, n_heads=12).ffn_hidden == 2048


# -- attention --------------------------------------------------------------------


def test_single_token_attends_to_itself(tiny_cfg, rng):
    p = _params(tiny_cfg)
    z = Tensor(rng.standard_normal((2, 1, tiny_cfg.d_model)))
    out = causal_attention(z, p, "blocks.0", tiny_cfg, np.arange(1))
    expected = z.data @ p["blocks.0.attn.wv"].data @ p["blocks.0.attn.wo"].data
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_zero_query_key_gives_prefix_mean(tiny_cfg, rng):
    p = _params(tiny_cfg)
    p["blocks.0.attn.wq"].data[:] = 0
    p["blocks.0.attn.wk"].data[:] = 0
    z = rng.standard_normal((1, 5, tiny_cfg.d_model))
    out = causal_attention(Tensor(z), p, "blocks.0", tiny_cfg, np.arange(5))
    v = z[0] @ p["blocks.0.attn.wv"].data
    means = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(out.data[0], means @ p["blocks.0.attn.wo"].data, atol=1e-12)


def test_causal_attention_rows_sum_to_one_and_mask_is_exact(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 2, 5, 4))) for _ in range(3))
    eye = Tensor(np.broadcast_to(np.eye(5), (1, 2, 5, 5)).copy())
    weights = attend_causal(q, k, eye)  # v = identity exposes the weights
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(weights.data[0, 0], 1) == 0.0)


@settings(max_examples=20, deadline=None)
@given(T=st.integers(2, 8), j=st.integers(0, 7), seed=st.integers(0, 2**31 - 1))
def test_causality_of_attention_and_ar_forward(T, j, seed):
    j = j % T
    cfg = ModelConfig(d_model=16, n_heads=2, n_layers=2, context_length=8, feature_dim=4, dtype="float64", init_std=0.3)
    model = ARTransformer(cfg, seed=1)
    model.params["head"].data[:] = np.random.default_rng(seed).standard_normal(model.params["head"].shape)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, T, 4))
    y = x.copy()
    y[0, j] += rng.standard_normal(4)
    a, b = model.forward(x).data, model.forward(y).data
    assert np.array_equal(a[:, :j], b[:, :j])
    z = rng.standard_normal((1, T, 16))
    z2 = z.copy()
    z2[0, j] += 1.0
    pa = causal_attention(Tensor(z), model.params, "blocks.0", cfg, np.arange(T)).data
    pb = causal_attention(Tensor(z2), model.params, "blocks.0", cfg, np.arange(T)).data
    assert np.array_equal(pa[:, :j], pb[:, :j])


def test_row_unchanged_when_later_row_perturbed(tiny_cfg, rng):
    p = _params(tiny_cfg)
    z = rng.standard_normal((1, 4, tiny_cfg.d_model))
    z2 = z.copy()
    z2[0, 3] += 5.0
    a = causal_attention(Tensor(z), p, "blocks.0", tiny_cfg, np.arange(4)).data
    b = causal_attention(Tensor(z2), p, "blocks.0", tiny_cfg, np.arange(4)).data
    assert np.array_equal(a[0, 2], b[0, 2])


def test_block_stack_matches_numpy_reference(rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_layers=3, context_length=8, feature_dim=4, dtype="float64", init_std=0.3)
    p = _params(cfg, seed=4)
    x = rng.standard_normal((1, 6, 16))
    out = Tensor(x)
    for i in range(cfg.n_layers):
        out = block_forward(out, p, f"blocks.{i}", cfg, np.arange(6))
    ref = baseline_stack(x[0], p, cfg.n_layers, cfg.n_heads, cfg.norm_eps)
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-10, atol=1e-12)


def test_zero_branch_weights_give_identity_block(tiny_cfg, rng):
    p = _params(tiny_cfg)
    p["blocks.0.attn.wo"].data[:] = 0
    p["blocks.0.ffn.w_down"].data[:] = 0
    x = rng.standard_normal((2, 5, tiny_cfg.d_model))
    out = block_forward(Tensor(x), p, "blocks.0", tiny_cfg, np.arange(5))
    assert np.array_equal(out.data, x)


# -- rotary -----------------------------------------------------------------------


def test_rotary_position_zero_is_identity(rng):
    x = rng.standard_normal((3, 1, 8))
    assert np.array_equal(rotary_positions(Tensor(x), [0]).data, x)


@settings(max_examples=50, deadline=None)
@given(pos=st.integers(0, 10_000), seed=st.integers(0, 2**31 - 1))
def test_rotary_preserves_norm(pos, seed):
    x = np.random.default_rng(seed).standard_normal((1, 8))
    r = rotary_positions(Tensor(x), [pos]).data
    assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_rotary_matches_complex_reference(rng):
    x = rng.standard_normal((2, 5, 8))
    np.testing.assert_allclose(rotary_positions(Tensor(x), np.arange(5)).data, rotate(x, np.arange(5)), atol=1e-13)


def test_rotary_dot_depends_only_on_offset(rng):
    q, k = rng.standard_normal(8), rng.standard_normal(8)

    def dot(i, j):
        return float(rotary_positions(Tensor(q[None]), [i]).data[0] @ rotary_positions(Tensor(k[None]), [j]).data[0])

    for offset in (0, 1, 3, 7):
        vals = [dot(i + offset, i) for i in (0, 2, 11, 40)]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-10, atol=1e-12)


def test_rotary_rejects_odd_dim():
    with pytest.raises(ShapeError):
        rotary_positions(Tensor(np.ones((1, 3))), [0])


# -- baseline model ---------------------------------------------------------------


def test_copy_construction_predicts_most_recent_feature(rng):
    cfg = ModelConfig(d_model=4, n_heads=2, n_layers=2, context_length=8, feature_dim=4, dtype="float64", norm_eps=0.0)
    model = ARTransformer(cfg)
    for name, p in model.params.items():
        if name.endswith(("attn.wo", "ffn.w_down")):
            p.data[:] = 0
    model.params["w_in"].data[:] = np.eye(4)
    model.params["head"].data[:] = np.eye(4)
    x = rng.standard_normal((2, 6, 4))
    x /= np.sqrt(np.mean(x * x, axis=-1, keepdims=True))  # unit RMS rows pass the final norm unchanged
    np.testing.assert_allclose(model.forward(x).data, x, rtol=1e-12)


def test_zero_head_gives_uniform_logits(tiny_discrete_cfg, rng):
    from ebwm.objectives import cross_entropy

    model = ARTransformer(tiny_discrete_cfg)
    ids = rng.integers(0, 256, size=(3, 8))
    logits = model.forward(ids)
    assert np.all(logits.data == 0)
    assert cross_entropy(logits, ids).item() == pytest.approx(math.log(256), rel=1e-12)


def test_context_overflow(tiny_cfg, rng):
    with pytest.raises(ContextOverflowError):
        ARTransformer(tiny_cfg).forward(rng.standard_normal((1, 9, 4)))


def test_wrong_input_rank(tiny_cfg):
    with pytest.raises(ShapeError):
        ARTransformer(tiny_cfg).forward(np.zeros((1, 3)))


@pytest.mark.parametrize("tie", [False, True])
def test_param_count_matches_shapes(tie):
    cfg = ModelConfig(d_model=48, n_heads=4, n_layers=3, context_length=8, mode="discrete", vocab_size=300,
                      feature_dim=None, tie_embeddings=tie)
    model = ARTransformer(cfg)
    assert param_count(model.params) == model.expected_param_count()


def test_full_size_block_count_formula():
    cfg = ModelConfig(d_model=768, n_heads=12, n_layers=12, mode="discrete", vocab_size=50277, feature_dim=None)
    per_block = 4 * 768 * 768 + 3 * 768 * 2048 + 2 * 768
    assert block_param_count(cfg) == per_block
    total = 12 * per_block + 768 + 2 * 50277 * 768
    assert ARTransformer.expected_param_count(type("M", (), {"cfg": cfg})()) == total


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    model = ARTransformer(tiny_cfg, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, {"note": "x"})
    raw = path.read_bytes()
    assert raw[0] == 1
    arrays, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert list(arrays) == list(model.params)
    for name, arr in arrays.items():
        assert arr.dtype == model.params[name].dtype
        assert np.array_equal(arr, model.params[name].data)


def test_checkpoint_rejects_bad_version_and_trailing_bytes(tmp_path, tiny_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ARTransformer(tiny_cfg).params)
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"\x07" + raw[1:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_gradients_flow_to_every_parameter(tiny_cfg, rng):
    model = ARTransformer(tiny_cfg, seed=2)
    model.params["head"].data[:] = rng.standard_normal(model.params["head"].shape) * 0.1
    with ad.Tape():
        out = model.forward(rng.standard_normal((2, 5, 4)))
        grads = ad.grad(ad.sum_(out * out), list(model.params.values()))
    assert all(np.any(g.data != 0) for g in grads)
