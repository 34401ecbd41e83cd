"""Synthetic continuous sequences and byte-level text batches."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

VOCAB_SIZE = 256


@dataclass
class SequenceBatch:
    """Teacher-forced layout: ``data[:, t+1]`` is the ground truth following ``data[:, :t+1]``.

    Continuous batches hold features [B, T+1, F]; discrete batches hold byte ids [B, T+1].
    """

    mode: str
    data: np.ndarray

    def __post_init__(self):
        if self.mode == "continuous":
            if self.data.ndim != 3 or not np.all(np.isfinite(self.data)):
                raise ValueError("continuous batch needs finite [B, T+1, F] features")
        elif self.mode == "discrete":
            if self.data.ndim != 2 or self.data.min(initial=0) < 0 or self.data.max(initial=0) >= VOCAB_SIZE:
                raise ValueError(f"discrete batch needs [B, T+1] ids in [0, {VOCAB_SIZE})")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def context(self) -> np.ndarray:
        return self.data[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.data[:, 1:]

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1] - 1


@dataclass
class ContinuousSpec:
    feature_dim: int = 16
    length: int = 16  # context length T; sequences carry T+1 states
    batch: int = 32
    gamma: float = 0.9
    mixing: str = "orthogonal"  # "none" | "orthogonal"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.mixing not in ("none", "orthogonal"):
            raise ValueError(f"unknown mixing {self.mixing!r}")


def mixing_matrix(dim: int, seed: int) -> np.ndarray:
    """Fixed random orthogonal matrix (QR of a Gaussian with sign-corrected diagonal)."""
    rng = np.random.default_rng([seed, 0x5EED])
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))[None, :]


def ar1_latents(batch: int, steps: int, dim: int, gamma: float, rng) -> np.ndarray:
    """Stationary unit-variance AR(1): u_{t+1} = gamma u_t + sqrt(1 - gamma^2) eps_t."""
    u = np.empty((batch, steps, dim))
    u[:, 0] = rng.standard_normal((batch, dim))
    noise = rng.standard_normal((batch, steps - 1, dim)) * np.sqrt(1.0 - gamma * gamma)
    for t in range(1, steps):
        u[:, t] = gamma * u[:, t - 1] + noise[:, t - 1]
    return u


def gen_continuous(spec: ContinuousSpec, *, return_latents: bool = False):
    rng = np.random.default_rng(spec.seed)
    u = ar1_latents(spec.batch, spec.length + 1, spec.feature_dim, spec.gamma, rng)
    x = u if spec.mixing == "none" else u @ mixing_matrix(spec.feature_dim, spec.seed).T
    batch = SequenceBatch("continuous", x)
    return (batch, u) if return_latents else batch


def copy_baseline_score(batch: SequenceBatch) -> float:
    """SmoothL1 (beta = 1) of predicting every next state as the current one."""
    from .objectives import smooth_l1

    if batch.mode != "continuous":
        raise ValueError("copy baseline is defined for continuous batches only")
    return smooth_l1(Tensor(batch.context.astype(np.float64)), batch.targets.astype(np.float64)).item()


# ---------------------------------------------------------------------------
# bytes
# ---------------------------------------------------------------------------


def tokenize_bytes(text) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize_bytes(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def batch_text(corpus: np.ndarray, length: int, batch: int, seed) -> SequenceBatch:
    """``batch`` random windows of ``length + 1`` tokens."""
    corpus = np.asarray(corpus)
    if corpus.size <= length + 1:
        raise ValueError(f"corpus of {corpus.size} tokens is too short for windows of {length + 1}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    starts = rng.integers(0, corpus.size - length, size=batch)
    idx = starts[:, None] + np.arange(length + 1)[None, :]
    return SequenceBatch("discrete", corpus[idx])


def unigram_entropy(corpus: np.ndarray) -> float:
    """Empirical byte entropy in nats."""
    counts = np.bincount(np.asarray(corpus), minlength=VOCAB_SIZE).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def load_corpus(path) -> np.ndarray:
    return tokenize_bytes(Path(path).read_bytes())


_ONSETS = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "th", "st", "br", "ch", "sh", "tr", "pl", "gr"]
_NUCLEI = ["a", "e", "i", "o", "u", "ea", "ou", "ai", "ee", "o"]
_CODAS = ["", "", "n", "r", "s", "t", "d", "l", "ng", "st", "m"]


def synthetic_corpus(n_bytes: int = 1_000_000, seed: int = 33) -> bytes:
    """English-like prose from a seeded word-level Markov source.

    Zipf-distributed pseudo-words, each with a few favoured successors,
    assembled into capitalized, punctuated sentences and paragraphs.
    """
    rng = np.random.default_rng(seed)
    n_words = 3000
    words = []
    seen = set()
    while len(words) < n_words:
        k = int(rng.choice([1, 1, 2, 2, 2, 3]))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(k)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    freq = 1.0 / np.arange(1, n_words + 1) ** 1.1
    freq /= freq.sum()
    cdf = np.cumsum(freq)
    followers = rng.choice(n_words, size=(n_words, 6), p=freq)

    out: list[str] = []
    size = 0
    prev = int(np.searchsorted(cdf, rng.random()))
    sentence_in_par = 0
    while size < n_bytes:
        n = int(rng.integers(4, 15))
        toks = []
        for i in range(n):
            if rng.random() < 0.55:
                prev = int(followers[prev, rng.integers(6)])
            else:
                prev = min(int(np.searchsorted(cdf, rng.random())), n_words - 1)
            w = words[prev]
            if i == 0:
                w = w.capitalize()
            elif rng.random() < 0.07:
                toks[-1] += ","
            toks.append(w)
        end = rng.choice([".", ".", ".", ".", "?", "!"])
        sentence = " ".join(toks) + end
        sentence_in_par += 1
        if sentence_in_par >= rng.integers(3, 8):
            sentence += "\n\n"
            sentence_in_par = 0
        else:
            sentence += " "
        out.append(sentence)
        size += len(sentence)
    return "".join(out).encode("ascii")[:n_bytes]


# ---------------------------------------------------------------------------
# continuous fixture files
# ---------------------------------------------------------------------------

_FIXTURE_MAGIC = b"EBWC"
_FIXTURE_HEADER = struct.Struct("<4sIIIdq")


def write_continuous_fixture(path, batch: SequenceBatch, gamma: float, seed: int) -> None:
    """Header (magic, B, steps, F, gamma, seed) then row-major little-endian f32 features."""
    B, S, F = batch.data.shape
    with open(path, "wb") as fh:
        fh.write(_FIXTURE_HEADER.pack(_FIXTURE_MAGIC, B, S, F, float(gamma), int(seed)))
        fh.write(batch.data.astype("<f4").tobytes())


def read_continuous_fixture(path) -> tuple[SequenceBatch, float, int]:
    raw = Path(path).read_bytes()
    magic, B, S, F, gamma, seed = _FIXTURE_HEADER.unpack_from(raw)
    if magic != _FIXTURE_MAGIC:
        raise ValueError(f"{path}: not a continuous fixture")
    data = np.frombuffer(raw, dtype="<f4", offset=_FIXTURE_HEADER.size).reshape(B, S, F)
    return SequenceBatch("continuous", data.astype(np.float32)), gamma, seed
