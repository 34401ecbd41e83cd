"""Training configuration: nested dataclasses loaded from JSON with dotted overrides.

Every named hyperparameter is a key. Defaults follow the video-feature
setting; ``FULL_SIZE_PRESETS`` holds the full-size CV and NLP settings.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .mcmc import MCMCConfig
from .nn import ModelConfig
from .objectives import LossWeights


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


@dataclass
class DatasetConfig:
    kind: str = "continuous"  # "continuous" | "text"
    # continuous
    gamma: float = 0.9
    mixing: str = "orthogonal"
    train_sequences: int = 4096
    val_sequences: int = 512
    # text
    path: str | None = None  # None: seeded synthetic corpus
    synthetic_bytes: int = 1_000_000
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("continuous", "text"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class TrainConfig:
    family: str = "ebwm"  # "baseline" | "ebwm"
    model: ModelConfig = field(default_factory=ModelConfig)
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    base_lr: float = 2e-4
    batch_size: int = 64
    effective_batch_size: int = 192
    warmup_steps: int = 10_000
    warmup_divider: float = 20.0
    min_lr_scale: float = 10.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    max_steps: int = 100_000
    eval_every: int = 500
    eval_batches: int = 4
    seed: int = 33
    spike_window: int = 50
    log_wall_time: bool = True
    metrics_path: str = "runs/metrics.csv"
    checkpoint_path: str = "runs/model.ckpt"

    def __post_init__(self):
        if self.family not in ("baseline", "ebwm"):
            raise ValueError(f"unknown model family {self.family!r}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if self.effective_batch_size % self.batch_size:
            raise ValueError("effective_batch_size must be a multiple of batch_size")

    @property
    def accumulation(self) -> int:
        return self.effective_batch_size // self.batch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError as err:
                errors.append(err.message)
        raise ConfigError(key, "; ".join(errors) or f"invalid value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(key, f"expected a list of {len(args)} numbers, got {value!r}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, key + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in names:
            raise ConfigError(prefix + k, "unknown key")
        kwargs[k] = _coerce(v, hints[k], prefix + k)
    try:
        return cls(**kwargs)
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        bad = _guess_key(str(err), kwargs)
        raise ConfigError(prefix + (bad or cls.__name__), str(err)) from None


def _guess_key(message: str, kwargs: dict) -> str | None:
    for k in kwargs:
        if k in message:
            return k
    return None


def _set_dotted(data: dict, dotted: str, value):
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(dotted, f"{p} is not a section")
        cur = nxt
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def merge(base: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(data: dict, overrides: typing.Iterable[str] = ()) -> TrainConfig:
    data = json.loads(json.dumps(data))
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(data, key, value)
    return _build(TrainConfig, data)


def load(path, overrides: typing.Iterable[str] = ()) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON at line {err.lineno}: {err.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be an object")
    return from_dict(data, overrides)


FULL_SIZE_PRESETS = {
    "cv": {
        "family": "ebwm",
        "base_lr": 2e-4,
        "batch_size": 64,
        "effective_batch_size": 192,
        "model": {"d_model": 768, "n_heads": 12, "n_layers": 12, "context_length": 16,
                  "mode": "continuous", "feature_dim": 768},
        "mcmc": {"steps": 4, "alpha_init": 3e4, "alpha_lr_multiplier": 2e5},
    },
    "nlp": {
        "family": "ebwm",
        "base_lr": 2e-4,
        "batch_size": 24,
        "effective_batch_size": 72,
        "model": {"d_model": 768, "n_heads": 12, "n_layers": 12, "context_length": 256,
                  "mode": "discrete", "vocab_size": 50277, "feature_dim": None},
        "mcmc": {"steps": 2, "alpha_init": 3e5, "alpha_lr_multiplier": 2e6},
        "dataset": {"kind": "text"},
    },
}
