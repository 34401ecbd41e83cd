"""Training losses: reconstruction, energy regression, out-of-bounds penalty."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    reconstruction: float = 60.0
    energy: float = 0.0
    bounds: float = 0.0
    energy_distance: str = "squared"  # "squared" | "absolute"
    energy_label_every_step: bool = False

    def __post_init__(self):
        for name in ("reconstruction", "energy", "bounds"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss coefficient {name} must be >= 0")
        if self.energy_distance not in ("squared", "absolute"):
            raise ValueError(f"unknown energy distance {self.energy_distance!r}")


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, like.dtype))


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    target = _const(target, pred)
    _check_same(pred, target, "smooth_l1")
    x = pred - target
    a = ad.abs_(x)
    inside = Tensor((a.data < beta).astype(x.dtype))
    per = inside * (x * x) * (0.5 / beta) + (1.0 - inside) * (a - 0.5 * beta)
    return ad.mean(per)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy of logits [..., V] against integer targets [...]."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"cross_entropy: target id out of range [0, {V})")
    onehot = np.zeros(logits.shape, logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = ad.sum_(logits * Tensor(onehot), axis=-1)
    return ad.mean(ad.logsumexp(logits, axis=-1) - picked)


def cross_entropy_next_token(candidate: Tensor, targets, decoder) -> Tensor:
    """Cross-entropy of decoded refined candidates; ``decoder`` maps [...,d] to logits."""
    return cross_entropy(decoder(candidate), targets)


def energy_label(z, z_hat) -> Tensor:
    """(1 - cos(z, z_hat)) / 2 along the last axis: 0 = identical direction, 1 = opposite."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, np.float64))
    z_hat = z_hat if isinstance(z_hat, Tensor) else Tensor(np.asarray(z_hat, z.dtype))
    cos = ad.cosine_similarity(z, z_hat, axis=-1)
    # rounding can push |cos| a few ulps past 1; clamp keeps labels inside [0, 1]
    return (1.0 - ad.clamp(cos, -1.0, 1.0)) * 0.5


def energy_regression_loss(predicted: Tensor, labels, distance: str = "squared") -> Tensor:
    labels = _const(labels, predicted)
    _check_same(predicted, labels, "energy_regression_loss")
    diff = predicted - labels
    if distance == "squared":
        return ad.mean(diff * diff)
    return ad.mean(ad.abs_(diff))


def bounds_loss(predicted: Tensor) -> Tensor:
    """Mean of max(0, E - 1) + max(0, -E)."""
    above = Tensor((predicted.data > 1.0).astype(predicted.dtype))
    below = Tensor((predicted.data < 0.0).astype(predicted.dtype))
    return ad.mean(above * (predicted - 1.0) - below * predicted)


def combine(terms: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the available terms; missing terms count as zero."""
    if weights.reconstruction == weights.energy == weights.bounds == 0:
        log.warning("all loss coefficients are zero; the loss is identically 0")
    total = None
    for name, coef in (("reconstruction", weights.reconstruction), ("energy", weights.energy),
                       ("bounds", weights.bounds)):
        t = terms.get(name)
        if t is None or coef == 0:
            continue
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, np.float64))
        total = t * coef if total is None else total + t * coef
    if total is None:
        total = Tensor(np.zeros((), np.float64))
    return total


def total_loss(model, batch, candidate: Tensor, weights: LossWeights, trace=None):
    """Weighted training loss on a refined candidate; returns (loss, breakdown of floats).

    Energy-regression and bounds terms re-score the final candidate, so the
    predicted energies belong to the same candidate the labels describe.
    With ``energy_label_every_step`` the energy term instead averages over
    every refinement step recorded in ``trace``.
    """
    terms = {}
    if model.cfg.mode == "continuous":
        target = Tensor(batch.targets.astype(candidate.dtype))
        terms["reconstruction"] = smooth_l1(candidate, target, beta=1.0)
    else:
        terms["reconstruction"] = cross_entropy(model.decode(candidate), batch.targets)
        target = model.token_embeddings(batch.targets)
    if weights.energy > 0 or weights.bounds > 0:
        energies = model.energy(batch.context, candidate).energies
        if weights.energy > 0:
            pairs = [(energies, candidate)]
            if weights.energy_label_every_step and trace is not None:
                pairs = [(s.energy_tensor, s.candidate_tensor) for s in trace.steps] + pairs
            parts = [
                energy_regression_loss(e, energy_label(target.detach(), c.detach()).data, weights.energy_distance)
                for e, c in pairs
            ]
            term = parts[0]
            for extra in parts[1:]:
                term = term + extra
            terms["energy"] = term * (1.0 / len(parts))
        if weights.bounds > 0:
            terms["bounds"] = bounds_loss(energies)
    loss = combine(terms, weights)
    breakdown = {k: float(v.item()) for k, v in terms.items()}
    return loss, breakdown
