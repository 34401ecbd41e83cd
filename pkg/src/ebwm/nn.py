"""Llama-style transformer pieces and the autoregressive baseline.

Blocks are RMS pre-norm, rotary positions, gated (SiLU) feedforward, no
biases and no dropout. Parameters live in flat ``name -> Tensor`` dicts so
the optimizer and checkpoint code can treat every model uniformly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ContextOverflowError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    context_length: int = 16
    mode: str = "continuous"  # "continuous" | "discrete"
    vocab_size: int | None = None
    feature_dim: int | None = 16
    tie_embeddings: bool = False
    separate_prediction_projections: bool = False
    scale_self_score: bool = True
    rope_base: float = 10000.0
    init_std: float = 0.02
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary positions")
        if self.mode == "discrete":
            if self.vocab_size is None or self.feature_dim is not None:
                raise ValueError("discrete mode needs vocab_size and no feature_dim")
        elif self.mode == "continuous":
            if self.feature_dim is None or self.vocab_size is not None:
                raise ValueError("continuous mode needs feature_dim and no vocab_size")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tie_embeddings and self.mode != "discrete":
            raise ValueError("tie_embeddings only applies to discrete mode")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        h = int(8 * self.d_model / 3)
        return 8 * ((h + 7) // 8)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


PRESETS = {
    "desk": dict(d_model=64, n_heads=4, n_layers=2),
    "full": dict(d_model=768, n_heads=12, n_layers=12),
}


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _normal(rng, shape, std, dtype):
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def init_block_params(cfg: ModelConfig, rng, prefix: str, params: dict, prediction_proj: bool = False):
    d, h, dt, std = cfg.d_model, cfg.ffn_hidden, cfg.np_dtype, cfg.init_std
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{name}"] = _normal(rng, (d, d), std, dt)
    if prediction_proj:
        for name in ("wq_p", "wk_p", "wv_p"):
            params[f"{prefix}.attn.{name}"] = _normal(rng, (d, d), std, dt)
    params[f"{prefix}.ffn.w_gate"] = _normal(rng, (d, h), std, dt)
    params[f"{prefix}.ffn.w_up"] = _normal(rng, (d, h), std, dt)
    params[f"{prefix}.ffn.w_down"] = _normal(rng, (h, d), std, dt)
    params[f"{prefix}.norm_attn"] = Tensor(np.ones(d, dt), requires_grad=True)
    params[f"{prefix}.norm_ffn"] = Tensor(np.ones(d, dt), requires_grad=True)


def block_param_count(cfg: ModelConfig) -> int:
    d, h = cfg.d_model, cfg.ffn_hidden
    extra = 3 * d * d if cfg.separate_prediction_projections else 0
    return 4 * d * d + 3 * d * h + 2 * d + extra


def param_count(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------------


def rope_tables(head_dim: int, positions, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape [len(positions), head_dim // 2]."""
    if head_dim % 2:
        raise ShapeError(f"rotary positions need an even head dim, got {head_dim}")
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary_positions(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive half-pairs of the last axis of ``x`` [..., T, dh] by position."""
    cos, sin = rope_tables(x.shape[-1], positions, base, x.dtype)
    return ad.rope(x, cos, sin)


# ---------------------------------------------------------------------------
# attention / feedforward
# ---------------------------------------------------------------------------


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def project_qkv(x: Tensor, p: dict, prefix: str, cfg: ModelConfig, positions, suffix: str = ""):
    """Per-head query/key/value for normed input ``x``; rotary applied to q and k."""
    cos, sin = rope_tables(cfg.head_dim, positions, cfg.rope_base, x.dtype)
    q = ad.rope(_heads(x @ p[f"{prefix}.attn.wq{suffix}"], cfg.n_heads), cos, sin)
    k = ad.rope(_heads(x @ p[f"{prefix}.attn.wk{suffix}"], cfg.n_heads), cos, sin)
    v = _heads(x @ p[f"{prefix}.attn.wv{suffix}"], cfg.n_heads)
    return q, k, v


_MASKS: dict = {}


def causal_mask(T: int, dtype) -> np.ndarray:
    key = ("causal", T, np.dtype(dtype).str)
    if key not in _MASKS:
        m = np.where(np.tril(np.ones((T, T), bool)), 0.0, -np.inf).astype(dtype)
        _MASKS[key] = m
    return _MASKS[key]


def attend_causal(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh) + causal) v over [B, H, T, dh]."""
    T, dh = q.shape[-2], q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores + Tensor(causal_mask(T, q.dtype)), axis=-1)
    return weights @ v


def causal_attention(z: Tensor, p: dict, prefix: str, cfg: ModelConfig, positions) -> Tensor:
    """Multi-head causal self-attention on normed ``z`` [B,T,d], including the output projection."""
    T = z.shape[1]
    if len(positions) != T:
        raise ShapeError(f"positions length {len(positions)} != sequence length {T}")
    q, k, v = project_qkv(z, p, prefix, cfg, positions)
    return _merge_heads(attend_causal(q, k, v)) @ p[f"{prefix}.attn.wo"]


def feedforward(x: Tensor, p: dict, prefix: str) -> Tensor:
    gate = ad.silu(x @ p[f"{prefix}.ffn.w_gate"])
    return (gate * (x @ p[f"{prefix}.ffn.w_up"])) @ p[f"{prefix}.ffn.w_down"]


def rms_norm(x: Tensor, scale: Tensor, eps: float) -> Tensor:
    return ad.rms_normalize(x, eps) * scale


def block_forward(x: Tensor, p: dict, prefix: str, cfg: ModelConfig, positions) -> Tensor:
    x = x + causal_attention(rms_norm(x, p[f"{prefix}.norm_attn"], cfg.norm_eps), p, prefix, cfg, positions)
    return x + feedforward(rms_norm(x, p[f"{prefix}.norm_ffn"], cfg.norm_eps), p, prefix)


# ---------------------------------------------------------------------------
# autoregressive baseline
# ---------------------------------------------------------------------------


class ARTransformer:
    """Standard next-state predictor: one forward pass, prediction in the output space."""

    family = "baseline"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        p: dict[str, Tensor] = {}
        if cfg.mode == "discrete":
            p["embed"] = _normal(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std, dt)
        else:
            p["w_in"] = _normal(rng, (cfg.feature_dim, cfg.d_model), cfg.init_std, dt)
        for i in range(cfg.n_layers):
            init_block_params(cfg, rng, f"blocks.{i}", p)
        p["norm_out"] = Tensor(np.ones(cfg.d_model, dt), requires_grad=True)
        out_dim = cfg.vocab_size if cfg.mode == "discrete" else cfg.feature_dim
        if not cfg.tie_embeddings:
            # zero head: uniform logits / zero prediction at initialization
            p["head"] = Tensor(np.zeros((cfg.d_model, out_dim), dt), requires_grad=True)
        self.params = p

    def embed(self, context) -> Tensor:
        if self.cfg.mode == "discrete":
            return ad.gather_rows(self.params["embed"], context)
        return Tensor(np.asarray(context, self.cfg.np_dtype)) @ self.params["w_in"]

    def forward(self, context) -> Tensor:
        """Predictions for positions 1..T from context [B,T] ids or [B,T,F] features.

        Discrete mode returns logits [B,T,V]; continuous mode returns features [B,T,F].
        """
        cfg = self.cfg
        T = np.asarray(context).shape[1]
        if T > cfg.context_length:
            raise ContextOverflowError(f"sequence length {T} exceeds context length {cfg.context_length}")
        if cfg.mode == "continuous" and np.asarray(context).ndim != 3:
            raise ShapeError(f"continuous mode expects [B,T,F] features, got {np.asarray(context).shape}")
        if cfg.mode == "discrete" and np.asarray(context).ndim != 2:
            raise ShapeError(f"discrete mode expects [B,T] token ids, got {np.asarray(context).shape}")
        x = self.embed(context)
        positions = np.arange(T)
        for i in range(cfg.n_layers):
            x = block_forward(x, self.params, f"blocks.{i}", cfg, positions)
        x = rms_norm(x, self.params["norm_out"], cfg.norm_eps)
        head = self.params["embed"].transpose(1, 0) if cfg.tie_embeddings else self.params["head"]
        return x @ head

    def expected_param_count(self) -> int:
        cfg = self.cfg
        d = cfg.d_model
        n = cfg.n_layers * block_param_count(cfg) + d
        if cfg.mode == "discrete":
            n += cfg.vocab_size * d + (0 if cfg.tie_embeddings else d * cfg.vocab_size)
        else:
            n += 2 * cfg.feature_dim * d
        return n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Version byte, little-endian u32 manifest length, JSON manifest, raw LE buffers in manifest order."""
    names = list(params)
    manifest = {
        "params": [
            {"name": n, "shape": list(params[n].shape), "dtype": params[n].data.dtype.name}
            for n in names
        ],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            arr = params[n].data
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or raw[0] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[:1]!r}")
    (mlen,) = struct.unpack_from("<I", raw, 1)
    manifest = json.loads(raw[5 : 5 + mlen])
    offset = 5 + mlen
    arrays = {}
    for item in manifest["params"]:
        dt = np.dtype(item["dtype"]).newbyteorder("<")
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(item["shape"])
        arrays[item["name"]] = arr.astype(np.dtype(item["dtype"]))
        offset += count * dt.itemsize
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after manifest buffers")
    return arrays, manifest["meta"]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
