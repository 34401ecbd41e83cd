"""Energy-Based Transformer.

Two streams flow through every block: ``z_o`` holds the observed states and
is updated by ordinary causal attention; ``z_p`` holds one candidate next
state per position. Prediction row ``i`` attends to observed rows ``0..i``
and to itself, which is the ``T x (T+1)`` score matrix whose superdiagonal
carries each candidate's self-score. A final norm and a linear map turn each
``z_p`` row into a scalar energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .nn import (
    ContextOverflowError,
    ModelConfig,
    _merge_heads,
    _normal,
    attend_causal,
    block_param_count,
    feedforward,
    init_block_params,
    project_qkv,
    rms_norm,
)

_MASKS: dict = {}


def prediction_masks(T: int, dtype):
    """(lower, superdiagonal, additive -inf) masks for the T x (T+1) score matrix."""
    key = (T, np.dtype(dtype).str)
    if key not in _MASKS:
        i = np.arange(T)[:, None]
        j = np.arange(T + 1)[None, :]
        lower = (j <= i).astype(dtype)
        sup = (j == i + 1).astype(dtype)
        neg = np.where(j <= i + 1, 0.0, -np.inf).astype(dtype)
        _MASKS[key] = (lower, sup, neg)
    return _MASKS[key]


@dataclass
class EnergyOutput:
    energies: Tensor  # [B, T]
    total: Tensor  # scalar


def prediction_scores(q_p, k_o, k_p, scale_self: bool = True) -> Tensor:
    """Unnormalized [B,H,T,T+1] scores: prefix dots below/on the diagonal, self-score on the superdiagonal."""
    T, dh = q_p.shape[-2], q_p.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    lower, sup, neg = prediction_masks(T, q_p.dtype)
    past = (q_p @ k_o.transpose(0, 1, 3, 2)) * scale
    pad = Tensor(np.zeros(past.shape[:-1] + (1,), past.dtype))
    past = ad.concat([past, pad], axis=-1)
    own = ad.sum_(q_p * k_p, axis=-1, keepdims=True)
    if scale_self:
        own = own * scale
    return past * Tensor(lower) + own * Tensor(sup) + Tensor(neg)


def attend_prediction(q_p, k_o, v_o, k_p, v_p, scale_self: bool = True) -> Tensor:
    T = q_p.shape[-2]
    lower, sup, _ = prediction_masks(T, q_p.dtype)
    probs = ad.softmax(prediction_scores(q_p, k_o, k_p, scale_self), axis=-1)
    self_weight = ad.sum_(probs * Tensor(sup), axis=-1, keepdims=True)
    past_weight = (probs * Tensor(lower))[..., :T]
    return past_weight @ v_o + self_weight * v_p


def ebt_attention(zo: Tensor, zp: Tensor, p: dict, prefix: str, cfg: ModelConfig):
    """Attention update of both streams for normed inputs; returns (z_o_out, z_p_out)."""
    if zo.shape != zp.shape:
        raise ShapeError(f"z_o {zo.shape} and z_p {zp.shape} must match")
    T = zo.shape[1]
    q_o, k_o, v_o = project_qkv(zo, p, prefix, cfg, np.arange(T))
    suffix = "_p" if cfg.separate_prediction_projections else ""
    q_p, k_p, v_p = project_qkv(zp, p, prefix, cfg, np.arange(1, T + 1), suffix)
    wo = p[f"{prefix}.attn.wo"]
    zo_out = _merge_heads(attend_causal(q_o, k_o, v_o)) @ wo
    zp_out = _merge_heads(attend_prediction(q_p, k_o, v_o, k_p, v_p, cfg.scale_self_score)) @ wo
    return zo_out, zp_out


def ebt_block(zo: Tensor, zp: Tensor, p: dict, prefix: str, cfg: ModelConfig):
    na = p[f"{prefix}.norm_attn"]
    ao, ap = ebt_attention(rms_norm(zo, na, cfg.norm_eps), rms_norm(zp, na, cfg.norm_eps), p, prefix, cfg)
    zo, zp = zo + ao, zp + ap
    nf = p[f"{prefix}.norm_ffn"]
    zo = zo + feedforward(rms_norm(zo, nf, cfg.norm_eps), p, prefix)
    zp = zp + feedforward(rms_norm(zp, nf, cfg.norm_eps), p, prefix)
    return zo, zp


def _inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


class EnergyTransformer:
    """Context/candidate compatibility model.

    ``params`` also holds the learnable MCMC step size (``mcmc.alpha``, stored
    pre-softplus) and, when enabled, the learnable Langevin noise scale.
    """

    family = "ebwm"

    def __init__(self, cfg: ModelConfig, mcmc=None, seed: int = 0):
        from .mcmc import MCMCConfig

        self.cfg = cfg
        self.mcmc = mcmc or MCMCConfig()
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        p: dict[str, Tensor] = {}
        if cfg.mode == "discrete":
            p["embed"] = _normal(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std, dt)
        else:
            p["w_in"] = _normal(rng, (cfg.feature_dim, cfg.d_model), cfg.init_std, dt)
        for i in range(cfg.n_layers):
            init_block_params(cfg, rng, f"blocks.{i}", p, cfg.separate_prediction_projections)
        p["norm_out"] = Tensor(np.ones(cfg.d_model, dt), requires_grad=True)
        p["energy_head"] = _normal(rng, (cfg.d_model, 1), cfg.init_std, dt)
        if cfg.mode == "discrete":
            p["decoder"] = Tensor(np.zeros((cfg.d_model, cfg.vocab_size), dt), requires_grad=True)
        n_alpha = self.mcmc.steps if self.mcmc.alpha_per_step else 1
        raw = _inv_softplus(self.mcmc.alpha_init) if self.mcmc.alpha_init > 0 else -np.inf
        p["mcmc.alpha"] = Tensor(np.full(n_alpha, raw, dt), requires_grad=self.mcmc.alpha_learnable)
        if self.mcmc.noise_learnable:
            p["mcmc.noise"] = Tensor(np.full(1, self.mcmc.noise_scale, dt), requires_grad=True)
        self.params = p

    # -- sizes -------------------------------------------------------------
    @property
    def candidate_dim(self) -> int:
        return self.cfg.feature_dim if self.cfg.mode == "continuous" else self.cfg.d_model

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def block_param_count(self) -> int:
        return block_param_count(self.cfg)

    # -- mcmc parameters ---------------------------------------------------
    def step_size(self, step: int = 0) -> Tensor:
        a = self.params["mcmc.alpha"]
        if not a.requires_grad and np.all(np.isneginf(a.data)):
            return Tensor(np.zeros(1, a.dtype))
        if a.shape[0] > 1:
            a = a[step : step + 1]
        return ad.softplus(a)

    def noise_scale(self) -> Tensor | float:
        if "mcmc.noise" in self.params:
            return ad.abs_(self.params["mcmc.noise"])
        return self.mcmc.noise_scale

    # -- embeddings --------------------------------------------------------
    def embed_context(self, context) -> Tensor:
        if self.cfg.mode == "discrete":
            return ad.gather_rows(self.params["embed"], context)
        return Tensor(np.asarray(context, self.cfg.np_dtype)) @ self.params["w_in"]

    def embed_candidate(self, candidate: Tensor) -> Tensor:
        if self.cfg.mode == "discrete":
            return candidate
        return candidate @ self.params["w_in"]

    def token_embeddings(self, ids) -> Tensor:
        if self.cfg.mode != "discrete":
            raise ValueError("token embeddings exist only in discrete mode")
        return ad.gather_rows(self.params["embed"], ids)

    # -- forward -----------------------------------------------------------
    def streams(self, context, candidate: Tensor):
        """Run all blocks; returns final (z_o, z_p) before the energy head."""
        cfg = self.cfg
        ctx = np.asarray(context)
        B, T = ctx.shape[:2]
        if T > cfg.context_length:
            raise ContextOverflowError(f"sequence length {T} exceeds context length {cfg.context_length}")
        if candidate.shape != (B, T, self.candidate_dim):
            raise ShapeError(f"candidate shape {candidate.shape} != {(B, T, self.candidate_dim)}")
        if not np.all(np.isfinite(candidate.data)):
            raise NonFiniteError("energy_forward: non-finite candidate")
        zo = self.embed_context(context)
        zp = self.embed_candidate(candidate)
        for i in range(cfg.n_layers):
            zo, zp = ebt_block(zo, zp, self.params, f"blocks.{i}", cfg)
        return zo, zp

    def energy(self, context, candidate: Tensor) -> EnergyOutput:
        _, zp = self.streams(context, candidate)
        h = rms_norm(zp, self.params["norm_out"], self.cfg.norm_eps)
        e = h @ self.params["energy_head"]
        energies = e.reshape(e.shape[:-1])
        return EnergyOutput(energies, ad.sum_(energies))

    def decode(self, candidate: Tensor) -> Tensor:
        """Vocabulary logits for refined candidate embeddings (discrete mode only)."""
        if self.cfg.mode != "discrete":
            raise ValueError("decode_candidate is only defined in discrete mode")
        return candidate @ self.params["decoder"]
