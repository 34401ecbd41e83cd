import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from reference import log_softmax_ce
from reference import smooth_l1 as smooth_l1_ref

from ebwm.autodiff import NonFiniteError, ShapeError, Tape, Tensor, grad, no_grad
from ebwm.data import SequenceBatch
from ebwm.ebt import EnergyTransformer
from ebwm.mcmc import MCMCConfig, refine
from ebwm.objectives import (
    LossWeights,
    bounds_loss,
    combine,
    cross_entropy,
    cross_entropy_next_token,
    energy_label,
    energy_regression_loss,
    smooth_l1,
    total_loss,
)

finite = st.floats(-50, 50, allow_nan=False)


def _t(x):
    return Tensor(np.asarray(x, np.float64))


# -- smooth l1 --------------------------------------------------------------------


@pytest.mark.parametrize("diff, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_values(diff, expected):
    assert smooth_l1(_t([diff]), [0.0]).item() == expected


@given(hnp.arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(0.1, 5))
def test_smooth_l1_matches_reference(x, beta):
    assert smooth_l1(_t(x), np.zeros_like(x), beta).item() == pytest.approx(smooth_l1_ref(x, beta), rel=1e-12)


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_smooth_l1_is_c1_at_beta(beta):
    def value_and_slope(x):
        with Tape():
            t = Tensor(np.array([x]), requires_grad=True)
            loss = smooth_l1(t, [0.0], beta)
            (g,) = grad(loss, [t])
        return loss.item(), g.data[0]

    lo, hi = value_and_slope(beta - 1e-9), value_and_slope(beta + 1e-9)
    assert lo[0] == pytest.approx(hi[0], abs=1e-8)
    assert lo[1] == pytest.approx(hi[1], abs=1e-8)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        smooth_l1(_t([1.0, 2.0]), [1.0])
    with pytest.raises(ValueError):
        smooth_l1(_t([1.0]), [1.0], beta=0.0)


# -- cross-entropy ---------------------------------------------------------------------


def test_uniform_logits_give_log_v():
    assert cross_entropy(_t(np.zeros((2, 3, 256))), np.zeros((2, 3), int)).item() == pytest.approx(math.log(256))


def test_large_margin_gives_zero():
    logits = np.zeros((1, 4, 10))
    targets = np.array([[1, 7, 0, 9]])
    np.put_along_axis(logits, targets[..., None], 1e3, axis=-1)
    assert abs(cross_entropy(_t(logits), targets).item()) < 1e-6


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31 - 1))
def test_cross_entropy_matches_log_softmax_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 5, 7)) * 4
    targets = rng.integers(0, 7, (2, 5))
    assert cross_entropy(_t(logits), targets).item() == pytest.approx(log_softmax_ce(logits, targets), rel=1e-12)


def test_cross_entropy_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        cross_entropy(_t(np.zeros((1, 2, 4))), np.array([[0, 4]]))
    with pytest.raises(ValueError):
        cross_entropy(_t(np.zeros((1, 2, 4))), np.array([[-1, 0]]))


def test_cross_entropy_next_token_uses_decoder(rng):
    w = rng.standard_normal((3, 5))
    cand = rng.standard_normal((2, 4, 3))
    targets = rng.integers(0, 5, (2, 4))
    got = cross_entropy_next_token(_t(cand), targets, lambda c: c @ _t(w)).item()
    assert got == pytest.approx(log_softmax_ce(cand @ w, targets), rel=1e-12)


# -- energy labels and regression --------------------------------------------------------


@pytest.mark.parametrize("zhat, expected", [([1.0, 2.0], 0.0), ([-1.0, -2.0], 1.0), ([2.0, -1.0], 0.5)])
def test_energy_label_values(zhat, expected):
    assert energy_label(np.array([1.0, 2.0]), np.array(zhat)).item() == pytest.approx(expected, abs=1e-15)


nonzero_vec = hnp.arrays(np.float64, 6, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-2)


@given(nonzero_vec, nonzero_vec, st.floats(0.01, 100), st.floats(0.01, 100))
def test_energy_label_is_scale_invariant_and_bounded(z, zhat, a, b):
    base = energy_label(z, zhat).item()
    assert 0.0 <= base <= 1.0 + 1e-15
    assert energy_label(a * z, b * zhat).item() == pytest.approx(base, abs=1e-12)


def test_energy_label_rejects_zero_vector():
    with pytest.raises(NonFiniteError):
        energy_label(np.zeros(3), np.ones(3))


def test_energy_regression_examples(rng):
    labels = rng.random((3, 4))
    assert energy_regression_loss(_t(labels), labels).item() == 0.0
    assert energy_regression_loss(_t(labels + 0.1), labels).item() == pytest.approx(0.01, rel=1e-12)
    pred = rng.random((3, 4))
    assert energy_regression_loss(_t(pred), labels).item() == pytest.approx(np.mean((pred - labels) ** 2), rel=1e-14)
    assert energy_regression_loss(_t(pred), labels, "absolute").item() == pytest.approx(np.mean(np.abs(pred - labels)))
    with pytest.raises(ShapeError):
        energy_regression_loss(_t(pred), labels[:, :2])


# -- bounds -------------------------------------------------------------------------


@pytest.mark.parametrize("e, expected", [(0.5, 0.0), (1.2, 0.2), (-0.3, 0.3), (0.0, 0.0), (1.0, 0.0)])
def test_bounds_values(e, expected):
    assert bounds_loss(_t([e])).item() == pytest.approx(expected, abs=1e-15)


@given(hnp.arrays(np.float64, st.integers(1, 10), elements=finite))
def test_bounds_nonnegative_and_zero_inside(e):
    v = bounds_loss(_t(e)).item()
    assert v >= 0
    assert (v == 0) == bool(np.all((e >= 0) & (e <= 1)))


# -- combination ------------------------------------------------------------------------


def test_default_weights_scale_reconstruction():
    assert combine({"reconstruction": _t(0.1)}, LossWeights()).item() == pytest.approx(6.0)


def test_all_zero_coefficients_warn(caplog):
    with caplog.at_level(logging.WARNING):
        out = combine({"reconstruction": _t(0.4)}, LossWeights(0, 0, 0))
    assert out.item() == 0.0
    assert "zero" in caplog.text


def test_linear_combination():
    terms = {"reconstruction": _t(0.2), "energy": _t(0.3), "bounds": _t(0.4)}
    assert combine(terms, LossWeights(1, 1, 1)).item() == pytest.approx(0.9)


def test_negative_coefficient_rejected():
    with pytest.raises(ValueError):
        LossWeights(reconstruction=-1)
    with pytest.raises(ValueError):
        LossWeights(energy_distance="cosine")


# -- total loss through the refinement chain -----------------------------------------------


def _discrete_chain_setup(cfg):
    rng = np.random.default_rng(3)
    m = EnergyTransformer(cfg, MCMCConfig(steps=2, alpha_init=0.3, clamp=None), seed=1)
    m.params["decoder"].data[:] = rng.standard_normal(m.params["decoder"].shape) * 0.3
    batch = SequenceBatch("discrete", rng.integers(0, 256, (2, 5)))
    return m, batch, rng.standard_normal((2, 4, 16))


def test_discrete_total_loss_gradient_through_chain(tiny_discrete_cfg):
    m, batch, c0 = _discrete_chain_setup(tiny_discrete_cfg)
    weights = LossWeights(1.0, 0.0, 1.0)

    def loss():
        cand, trace = refine(m, batch.context, Tensor(c0.copy()))
        return total_loss(m, batch, cand, weights, trace)

    names = ["blocks.0.attn.wk", "embed", "energy_head", "decoder", "mcmc.alpha"]
    with Tape():
        value, breakdown = loss()
        grads = grad(value, [m.params[n] for n in names])
    assert set(breakdown) == {"reconstruction", "bounds"}
    rng = np.random.default_rng(5)
    for name, g in zip(names, grads):
        flat = m.params[name].data.reshape(-1)
        for i in rng.choice(flat.size, min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            with no_grad():
                fp = loss()[0].item()
            flat[i] = old - 1e-6
            with no_grad():
                fm = loss()[0].item()
            flat[i] = old
            fd = (fp - fm) / 2e-6
            a = g.data.reshape(-1)[i]
            assert abs(a - fd) <= 1e-4 * max(abs(a), abs(fd)) + 1e-6, (name, a, fd)


@pytest.mark.parametrize("every_step", [False, True])
def test_energy_term_treats_labels_as_constants(tiny_discrete_cfg, every_step):
    m, batch, c0 = _discrete_chain_setup(tiny_discrete_cfg)
    names = ["blocks.0.attn.wk", "energy_head", "mcmc.alpha"]
    with Tape():
        cand, trace = refine(m, batch.context, Tensor(c0.copy()))
        loss, breakdown = total_loss(m, batch, cand, LossWeights(0.0, 1.0, 0.0, energy_label_every_step=every_step),
                                     trace)
        got = grad(loss, [m.params[n] for n in names])
    with Tape():
        cand, trace = refine(m, batch.context, Tensor(c0.copy()))
        target = m.token_embeddings(batch.targets).data
        pairs = [(m.energy(batch.context, cand).energies, cand)]
        if every_step:
            pairs = [(s.energy_tensor, s.candidate_tensor) for s in trace.steps] + pairs
        parts = [energy_regression_loss(e, energy_label(target, c.data).data) for e, c in pairs]
        manual = parts[0]
        for extra in parts[1:]:
            manual = manual + extra
        manual = manual * (1.0 / len(parts))
        want = grad(manual, [m.params[n] for n in names])
    assert breakdown["energy"] == pytest.approx(manual.item(), rel=1e-12)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g.data, w.data, rtol=1e-10, atol=1e-14)
