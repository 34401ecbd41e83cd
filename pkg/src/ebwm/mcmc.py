"""Input-space refinement of candidate predictions by descending the energy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor

INIT_STRATEGIES = ("random-noise", "zeros", "copy-most-recent")


@dataclass
class MCMCConfig:
    steps: int = 4
    alpha_init: float = 3e4
    alpha_learnable: bool = True
    alpha_lr_multiplier: float = 2e5
    alpha_per_step: bool = False
    clamp: float | None = 1.0
    noise_scale: float = 0.0
    noise_learnable: bool = False
    init_strategy: str = "random-noise"
    init_noise_scale: float = 1.0
    energy_cutoff: float | None = None
    max_steps: int | None = None
    create_graph: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha_init < 0 or (self.alpha_init == 0 and self.alpha_learnable):
            raise ValueError("alpha_init must be > 0 (0 is allowed only as a frozen sanity setting)")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.clamp is not None and self.clamp <= 0:
            raise ValueError("clamp must be positive or None")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if self.energy_cutoff is not None:
            if self.max_steps is None:
                raise ValueError("energy_cutoff requires max_steps")
            if self.max_steps < self.steps:
                raise ValueError("max_steps must be >= steps")


# full-size step-size settings
CV_PRESET = dict(steps=4, alpha_init=3e4, alpha_lr_multiplier=2e5)
NLP_PRESET = dict(steps=2, alpha_init=3e5, alpha_lr_multiplier=2e6)


@dataclass
class StepRecord:
    candidate: np.ndarray
    energies: np.ndarray  # [B, T], of the candidate before this step's update
    alpha: float
    grad_norm: float
    energy_tensor: Tensor | None = field(default=None, repr=False)
    candidate_tensor: Tensor | None = field(default=None, repr=False)


@dataclass
class RefinementTrace:
    steps: list[StepRecord] = field(default_factory=list)
    converged_at: int | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def first_energy(self) -> float:
        return float(self.steps[0].energies.mean())

    @property
    def last_energy(self) -> float:
        return float(self.steps[-1].energies.mean())

    def to_ndjson(self) -> str:
        lines = [
            json.dumps(
                {
                    "step": i,
                    "mean_energy": float(s.energies.mean()),
                    "grad_norm": s.grad_norm,
                    "alpha": s.alpha,
                }
            )
            for i, s in enumerate(self.steps)
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ndjson())


def init_candidate(strategy: str, context, shape, seed=0, *, noise_scale: float = 1.0,
                   embed=None, dtype=np.float32) -> Tensor:
    """Starting point for refinement.

    ``copy-most-recent`` puts observed state ``i`` in candidate row ``i``; for
    token contexts it needs ``embed`` mapping ids to embeddings.
    """
    if strategy == "zeros":
        return Tensor(np.zeros(shape, dtype))
    if strategy == "random-noise":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return Tensor((rng.standard_normal(shape) * noise_scale).astype(dtype))
    if strategy == "copy-most-recent":
        ctx = np.asarray(context)
        if ctx.ndim == 3:
            return Tensor(ctx.astype(dtype, copy=True))
        if embed is None:
            raise ValueError("copy-most-recent on token ids needs an embedding function")
        return embed(ctx)
    raise ValueError(f"unknown init strategy {strategy!r}")


def refine(model, context, candidate0: Tensor, cfg=None, *, create_graph: bool | None = None,
           steps: int | None = None, rng=None):
    """Gradient descent on the model's energy with respect to the candidate.

    Each step: ``g = dE/dcandidate``, optionally clamped elementwise, then
    ``candidate <- candidate - alpha * g + sigma * noise``. When called inside
    an active tape with ``create_graph`` the whole chain stays differentiable,
    so a loss on the result trains the weights and the step size. Without an
    active tape every step uses its own throwaway tape (inference).
    """
    cfg = cfg or model.mcmc
    create_graph = cfg.create_graph if create_graph is None else create_graph
    outer = ad.current_tape()
    if cfg.energy_cutoff is not None and outer is None:
        n_steps = cfg.max_steps
    else:
        n_steps = steps or cfg.steps
    rng = rng if rng is not None else np.random.default_rng(0)
    trace = RefinementTrace()
    cand = candidate0

    for k in range(n_steps):
        if outer is None:
            tape = Tape()
            tape.__enter__()
            cand = tape.watch(Tensor(cand.data))
        else:
            tape = outer
            if cand._tape is not tape:
                cand = tape.watch(Tensor(cand.data))
        try:
            out = model.energy(context, cand)
            (g,) = ad.grad(out.total, [cand], create_graph=create_graph and outer is not None)
            if not np.all(np.isfinite(out.energies.data)) or not np.all(np.isfinite(g.data)):
                raise NonFiniteError(f"refine: non-finite energy or gradient at step {k}")
            if cfg.clamp is not None:
                g = ad.clamp(g, -cfg.clamp, cfg.clamp)
            alpha = model.step_size(k if cfg.alpha_per_step else 0)
            if outer is None:
                alpha = alpha.detach()
            new = cand - alpha * g
            sigma = model.noise_scale()
            if isinstance(sigma, Tensor) or sigma > 0:
                xi = Tensor(rng.standard_normal(cand.shape).astype(cand.dtype))
                new = new + (sigma.detach() if outer is None and isinstance(sigma, Tensor) else sigma) * xi
            if not np.all(np.isfinite(new.data)):
                raise NonFiniteError(f"refine: non-finite candidate after step {k}")
        finally:
            if outer is None:
                tape.__exit__(None, None, None)
        trace.steps.append(
            StepRecord(
                candidate=cand.data.copy(),
                energies=out.energies.data.copy(),
                alpha=float(alpha.data.reshape(-1)[0]),
                grad_norm=float(np.linalg.norm(g.data)),
                energy_tensor=out.energies if outer is not None else Tensor(out.energies.data),
                candidate_tensor=cand if outer is not None else Tensor(cand.data),
            )
        )
        cand = new if outer is not None else Tensor(new.data)
        if cfg.energy_cutoff is not None and outer is None and out.energies.data.mean() <= cfg.energy_cutoff:
            trace.converged_at = k
            break
    return cand, trace
