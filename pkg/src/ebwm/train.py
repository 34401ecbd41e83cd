"""Optimizer, learning-rate schedule, FLOPs accounting and the training loops."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .config import TrainConfig, from_dict
from .data import (
    SequenceBatch,
    ar1_latents,
    batch_text,
    load_corpus,
    mixing_matrix,
    synthetic_corpus,
    tokenize_bytes,
)
from .ebt import EnergyTransformer
from .mcmc import init_candidate, refine
from .nn import ARTransformer, block_param_count, load_checkpoint, save_checkpoint
from .objectives import cross_entropy, smooth_l1, total_loss

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "EBWM_OUTPUT_DIR"

FLOPS_CONVENTION = (
    "flops/sequence: P = transformer-block parameters, T = context length; "
    "forward = 2PT; backward = 2x forward; ebwm inference = K(forward + input-gradient backward); "
    "ebwm train = chain + outer backward (2x chain); per step = flops/sequence x effective batch"
)
PERPLEXITY_CONVENTION = "perplexity = exp(mean token-level cross-entropy over the split)"


# ---------------------------------------------------------------------------
# learning rate
# ---------------------------------------------------------------------------


def scaled_lr(base_lr: float, effective_batch_size: int) -> float:
    if base_lr <= 0 or effective_batch_size <= 0:
        raise ValueError("base_lr and effective_batch_size must be positive")
    return base_lr * effective_batch_size / 256


def lr_at_step(step: int, peak_lr: float, warmup_steps: int, warmup_divider: float,
               min_lr_scale: float, total_steps: int) -> float:
    """Linear warmup from peak/divider to peak, then cosine decay to peak/min_lr_scale."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        start = peak_lr / warmup_divider
        return start + (peak_lr - start) * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    floor = peak_lr / min_lr_scale
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    names: list[str]
    lr_scale: float = 1.0
    weight_decay: float = 0.0


class AdamW:
    """Adam with decoupled weight decay and global-norm clipping over all groups."""

    def __init__(self, params: dict[str, Tensor], groups: list[ParamGroup],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for g in groups for n in g.names}
        self.v = {n: np.zeros_like(params[n].data) for g in groups for n in g.names}
        self.last_group_lrs: list[float] = []

    def step(self, grads: dict[str, np.ndarray], lr: float, grad_clip: float | None = None) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFiniteError("optimizer: non-finite gradient norm")
        scale = grad_clip / norm if grad_clip is not None and norm > grad_clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        self.last_group_lrs = []
        for group in self.groups:
            glr = lr * group.lr_scale
            self.last_group_lrs.append(glr)
            for n in group.names:
                p = self.params[n].data
                g = grads.get(n)
                g = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False) * p.dtype.type(scale)
                if group.weight_decay:
                    p *= p.dtype.type(1.0 - glr * group.weight_decay)
                m, v = self.m[n], self.v[n]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= (glr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm


def param_groups(model, cfg: TrainConfig) -> list[ParamGroup]:
    trainable = [n for n, p in model.params.items() if p.requires_grad]
    mcmc = [n for n in trainable if n.startswith("mcmc.")]
    groups = [ParamGroup([n for n in trainable if n not in mcmc], 1.0, cfg.weight_decay)]
    if "mcmc.alpha" in mcmc:
        groups.append(ParamGroup(["mcmc.alpha"], cfg.mcmc.alpha_lr_multiplier, 0.0))
    rest = [n for n in mcmc if n != "mcmc.alpha"]
    if rest:
        groups.append(ParamGroup(rest, 1.0, 0.0))
    return groups


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def flops_estimate(cfg: TrainConfig, phase: str = "train") -> float:
    """FLOPs per sequence under ``FLOPS_CONVENTION``."""
    if phase not in ("train", "inference"):
        raise ValueError(f"unknown phase {phase!r}")
    P = cfg.model.n_layers * block_param_count(cfg.model)
    T = cfg.model.context_length
    fwd = 2.0 * P * T
    if cfg.family == "baseline":
        return fwd if phase == "inference" else 3.0 * fwd
    chain = cfg.mcmc.steps * (fwd + 2.0 * fwd)
    return chain if phase == "inference" else 3.0 * chain


def flops_per_step(cfg: TrainConfig) -> float:
    return flops_estimate(cfg, "train") * cfg.effective_batch_size


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_COLUMNS = [
    "step", "epoch", "split", "loss", "perplexity_or_mse", "copy_baseline_score",
    "mean_first_step_energy", "mean_last_step_energy", "alpha_value", "grad_norm",
    "lr", "cumulative_flops", "wall_seconds", "status",
]


@dataclass
class MetricsRow:
    step: int
    epoch: float
    split: str
    loss: float
    perplexity_or_mse: float
    copy_baseline_score: float | None = None
    mean_first_step_energy: float | None = None
    mean_last_step_energy: float | None = None
    alpha_value: float | None = None
    grad_norm: float | None = None
    lr: float | None = None
    cumulative_flops: float = 0.0
    wall_seconds: float | None = None
    status: str = "ok"

    def cells(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)))
        return out


class MetricsWriter:
    """Append-only CSV; every row is flushed so a killed run leaves a parseable file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(f"# {FLOPS_CONVENTION}\n# {PERPLEXITY_CONVENTION}\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRIC_COLUMNS)
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._w.writerow(row.cells())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({k: _parse_cell(v) for k, v in rec.items()})
    return rows


def _parse_cell(v: str):
    if v == "":
        return None
    try:
        return float(v)
    except ValueError:
        return v


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------


class DataSource:
    """Seeded training stream plus fixed validation batches."""

    def __init__(self, cfg: TrainConfig):
        ds, T = cfg.dataset, cfg.model.context_length
        self.cfg = cfg
        self.mode = cfg.model.mode
        if ds.kind == "continuous":
            if self.mode != "continuous":
                raise ValueError("continuous dataset needs a continuous model")
            F = cfg.model.feature_dim
            mix = mixing_matrix(F, cfg.seed) if ds.mixing == "orthogonal" else np.eye(F)
            dt = cfg.model.np_dtype
            # separate latent streams, one shared mixing map
            u_train = ar1_latents(ds.train_sequences, T + 1, F, ds.gamma, np.random.default_rng([cfg.seed, 0]))
            u_val = ar1_latents(ds.val_sequences, T + 1, F, ds.gamma, np.random.default_rng([cfg.seed, 1]))
            self.train = (u_train @ mix.T).astype(dt)
            self.val = (u_val @ mix.T).astype(dt)
            self.dataset_size = ds.train_sequences
        else:
            if self.mode != "discrete":
                raise ValueError("text dataset needs a discrete model")
            corpus = load_corpus(ds.path) if ds.path else tokenize_bytes(synthetic_corpus(ds.synthetic_bytes, cfg.seed))
            split = int(len(corpus) * (1.0 - ds.val_fraction))
            self.train, self.val = corpus[:split], corpus[split:]
            self.dataset_size = max(1, len(self.train) // (T + 1))
        self.corpus = np.concatenate([self.train, self.val]) if self.mode == "discrete" else None

    def sample(self, rng, batch: int) -> SequenceBatch:
        if self.mode == "continuous":
            idx = rng.integers(0, len(self.train), size=batch)
            return SequenceBatch("continuous", self.train[idx])
        return batch_text(self.train, self.cfg.model.context_length, batch, rng)

    def val_batches(self, n: int, batch: int) -> list[SequenceBatch]:
        rng = np.random.default_rng([self.cfg.seed, 2])
        if self.mode == "continuous":
            out = []
            for i in range(n):
                sl = self.val[(i * batch) % len(self.val):][:batch]
                out.append(SequenceBatch("continuous", sl))
            return out
        return [batch_text(self.val, self.cfg.model.context_length, batch, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def build_model(cfg: TrainConfig):
    if cfg.family == "baseline":
        return ARTransformer(cfg.model, seed=cfg.seed)
    return EnergyTransformer(cfg.model, cfg.mcmc, seed=cfg.seed)


def _step_rng(cfg: TrainConfig, *parts) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *parts])


def ebwm_predict(model: EnergyTransformer, batch: SequenceBatch, rng, create_graph=None, steps=None):
    """Initialize and refine candidates for every position of ``batch``."""
    mc = model.mcmc
    shape = (batch.batch_size, batch.length, model.candidate_dim)
    embed = model.token_embeddings if model.cfg.mode == "discrete" else None
    cand0 = init_candidate(mc.init_strategy, batch.context, shape, rng,
                           noise_scale=mc.init_noise_scale, embed=embed, dtype=model.cfg.np_dtype)
    return refine(model, batch.context, cand0, create_graph=create_graph, steps=steps, rng=rng)


def batch_loss(model, cfg: TrainConfig, batch: SequenceBatch, rng):
    """Training objective on one micro-batch (inside an active tape).

    Returns (loss, info) where info carries the reconstruction term and energies.
    """
    info: dict = {}
    if isinstance(model, ARTransformer):
        pred = model.forward(batch.context)
        if cfg.model.mode == "continuous":
            recon = smooth_l1(pred, batch.targets)
            info["mse"] = float(np.mean((pred.data - batch.targets) ** 2))
        else:
            recon = cross_entropy(pred, batch.targets)
        info["reconstruction"] = recon.item()
        return recon, info
    cand, trace = ebwm_predict(model, batch, rng)
    loss, breakdown = total_loss(model, batch, cand, cfg.loss, trace)
    info.update(breakdown)
    info["first_energy"] = trace.first_energy
    info["last_energy"] = trace.last_energy
    if cfg.model.mode == "continuous":
        info["mse"] = float(np.mean((cand.data - batch.targets) ** 2))
    return loss, info


def alpha_value(model) -> float | None:
    if not isinstance(model, EnergyTransformer):
        return None
    return float(model.step_size(0).data.reshape(-1)[0])


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def resolve_output(path: str) -> Path:
    root = os.environ.get(OUTPUT_DIR_ENV)
    return Path(root) / Path(path).name if root else Path(path)


class Trainer:
    def __init__(self, cfg: TrainConfig, data: DataSource | None = None, metrics_path=None,
                 total_steps: int | None = None):
        self.cfg = cfg
        self.data = data or DataSource(cfg)
        self.model = build_model(cfg)
        self.opt = AdamW(self.model.params, param_groups(self.model, cfg), cfg.betas)
        self.peak_lr = scaled_lr(cfg.base_lr, cfg.effective_batch_size)
        self.total_steps = cfg.max_steps if total_steps is None else total_steps
        self.step = 0
        self.cumulative_flops = 0.0
        self._data_rng = _step_rng(cfg, 0xDA7A)
        self._t0 = time.perf_counter()
        self.writer = MetricsWriter(metrics_path) if metrics_path else None
        self.val = self.data.val_batches(cfg.eval_batches, cfg.batch_size)
        self.history: list[float] = []

    # -- one optimizer step ---------------------------------------------------
    def lr(self) -> float:
        c = self.cfg
        return lr_at_step(min(self.step, self.total_steps), self.peak_lr, c.warmup_steps,
                          c.warmup_divider, c.min_lr_scale, self.total_steps)

    def train_step(self, batch: SequenceBatch | None = None) -> MetricsRow:
        cfg = self.cfg
        names = [n for n, p in self.model.params.items() if p.requires_grad]
        acc: dict[str, np.ndarray] = {}
        losses, infos = [], []
        status = "ok"
        grad_norm = None
        lr = self.lr()
        try:
            for micro in range(cfg.accumulation):
                b = batch if batch is not None else self.data.sample(self._data_rng, cfg.batch_size)
                with Tape():
                    loss, info = batch_loss(self.model, cfg, b, _step_rng(cfg, self.step, micro))
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"non-finite loss at step {self.step}")
                    grads = ad.grad(loss, [self.model.params[n] for n in names])
                for n, g in zip(names, grads):
                    acc[n] = g.data / cfg.accumulation if n not in acc else acc[n] + g.data / cfg.accumulation
                losses.append(loss.item())
                infos.append(info)
            grad_norm = self.opt.step(acc, lr, cfg.grad_clip)
            self._audit_group_lrs(lr)
        except NonFiniteError as err:
            log.warning("aborted step %d: %s", self.step, err)
            status = "aborted"
        ok = status == "ok"
        # the stability history tracks the weighted objective; the row reports the
        # unweighted reconstruction so train and val curves share a scale
        self.history.append(float(np.mean(losses)) if ok else float("nan"))
        loss_value = float(np.mean([i["reconstruction"] for i in infos])) if ok else float("nan")
        self.cumulative_flops += flops_per_step(cfg)
        row = MetricsRow(
            step=self.step,
            epoch=(self.step + 1) * cfg.effective_batch_size / self.data.dataset_size,
            split="train",
            loss=loss_value,
            perplexity_or_mse=self._quality(infos) if status == "ok" else float("nan"),
            copy_baseline_score=None,
            mean_first_step_energy=_mean(infos, "first_energy"),
            mean_last_step_energy=_mean(infos, "last_energy"),
            alpha_value=alpha_value(self.model),
            grad_norm=grad_norm,
            lr=lr,
            cumulative_flops=self.cumulative_flops,
            wall_seconds=self._wall(),
            status=status,
        )
        self.step += 1
        if self.writer:
            self.writer.write(row)
        return row

    def _audit_group_lrs(self, lr: float) -> None:
        for group, glr in zip(self.opt.groups, self.opt.last_group_lrs):
            expected = lr * group.lr_scale
            if "mcmc.alpha" in group.names:
                log.debug("step %d: alpha lr %.6g", self.step, glr)
            if glr != expected:
                raise AssertionError(f"group lr {glr} != {expected}")

    def _quality(self, infos) -> float:
        if self.cfg.model.mode == "discrete":
            return float(np.exp(np.mean([i["reconstruction"] for i in infos])))
        return float(np.mean([i["mse"] for i in infos]))

    def _wall(self) -> float | None:
        return time.perf_counter() - self._t0 if self.cfg.log_wall_time else None

    # -- evaluation -------------------------------------------------------------
    def evaluate(self, batches: list[SequenceBatch] | None = None) -> MetricsRow:
        res = evaluate(self.model, self.cfg, batches or self.val)
        row = MetricsRow(
            step=self.step,
            epoch=self.step * self.cfg.effective_batch_size / self.data.dataset_size,
            split="val",
            loss=res["reconstruction"],
            perplexity_or_mse=res["perplexity"] if self.cfg.model.mode == "discrete" else res["mse"],
            copy_baseline_score=res.get("copy_baseline"),
            mean_first_step_energy=res.get("first_energy"),
            mean_last_step_energy=res.get("last_energy"),
            alpha_value=alpha_value(self.model),
            lr=None,
            cumulative_flops=self.cumulative_flops,
            wall_seconds=self._wall(),
        )
        if self.writer:
            self.writer.write(row)
        return row

    def fit(self, steps: int | None = None, callback=None) -> list[MetricsRow]:
        steps = self.cfg.max_steps if steps is None else steps
        rows = []
        for _ in range(steps):
            rows.append(self.train_step())
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                row = self.evaluate()
                rows.append(row)
                if callback and callback(self, row):
                    break
        return rows

    def save(self, path) -> None:
        save_checkpoint(path, self.model.params, {"config": self.cfg.to_dict(), "step": self.step})

    def close(self) -> None:
        if self.writer:
            self.writer.close()


def _mean(infos, key):
    vals = [i[key] for i in infos if key in i]
    return float(np.mean(vals)) if vals else None


def evaluate(model, cfg: TrainConfig, batches: list[SequenceBatch]) -> dict:
    """Validation reconstruction (SmoothL1 or token CE) averaged over ``batches``."""
    recon, sq, first, last, copy = [], [], [], [], []
    for i, b in enumerate(batches):
        if isinstance(model, ARTransformer):
            with ad.no_grad():
                pred = model.forward(b.context)
        else:
            pred, trace = ebwm_predict(model, b, np.random.default_rng([cfg.seed, 3, i]))
            first.append(trace.first_energy)
            last.append(trace.last_energy)
            if cfg.model.mode == "discrete":
                with ad.no_grad():
                    pred = model.decode(pred)
        with ad.no_grad():
            if cfg.model.mode == "continuous":
                recon.append(smooth_l1(pred, b.targets).item())
                sq.append(float(np.mean((pred.data - b.targets) ** 2)))
                copy.append(smooth_l1(Tensor(b.context), b.targets).item())
            else:
                recon.append(cross_entropy(pred, b.targets).item())
    out = {"reconstruction": float(np.mean(recon))}
    if cfg.model.mode == "continuous":
        out["mse"] = float(np.mean(sq))
        out["copy_baseline"] = float(np.mean(copy))
    else:
        out["perplexity"] = float(np.exp(out["reconstruction"]))
    if first:
        out["first_energy"] = float(np.mean(first))
        out["last_energy"] = float(np.mean(last))
    return out


def load_model(path):
    """Rebuild a model and its config from a checkpoint written by ``Trainer.save``."""
    arrays, meta = load_checkpoint(path)
    cfg = from_dict(meta["config"])
    model = build_model(cfg)
    missing = set(model.params) - set(arrays)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    for n, arr in arrays.items():
        if n not in model.params or model.params[n].shape != arr.shape:
            raise ValueError(f"{path}: parameter {n} does not match the configured model")
        model.params[n].data = arr.copy()
    return model, cfg


def train(cfg: TrainConfig, steps: int | None = None) -> tuple[Trainer, list[MetricsRow]]:
    """Full run: metrics CSV and final checkpoint under the configured paths."""
    metrics_path = resolve_output(cfg.metrics_path)
    trainer = Trainer(cfg, metrics_path=metrics_path, total_steps=cfg.max_steps if steps is None else steps)
    try:
        rows = trainer.fit(steps)
        if not rows or rows[-1].split != "val":
            rows.append(trainer.evaluate())
        trainer.save(resolve_output(cfg.checkpoint_path))
    finally:
        trainer.close()
    return trainer, rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# (name, config delta, reported stable, reported convergent)
ABLATIONS = [
    ("Energy Loss", {"loss": {"energy": 1.0}}, False, True),
    ("Bounds Loss", {"loss": {"bounds": 1.0}}, False, True),
    ("Unclamped MCMC Gradient", {"mcmc": {"clamp": None}}, False, False),
    ("Non-Learnable α (MCMC Step Size)", {"mcmc": {"alpha_learnable": False}}, False, True),
    ("Lower Initial MCMC Step Size", {"mcmc": {"alpha_init": "/10"}}, False, True),
    ("Langevin Dynamics", {"mcmc": {"noise_scale": "langevin"}}, True, True),
    ("Learnable Langevin Dynamics", {"mcmc": {"noise_scale": "langevin", "noise_learnable": True}}, True, True),
    ("All Specified Design Choices", {}, True, True),
]
NOT_APPLICABLE = ["Unfrozen Encoder (no pretrained encoder in this build)"]

ABLATION_COLUMNS = [
    "design_choice", "stable_training", "convergent", "loss_spikes", "diverged", "final_loss",
    "reference_stable_training", "reference_convergent", "agrees_with_reference", "error",
]


def ablation_delta(base: TrainConfig, delta: dict, langevin_noise: float = 0.05) -> TrainConfig:
    data = base.to_dict()
    for section, changes in delta.items():
        for k, v in changes.items():
            if v == "/10":
                v = data[section][k] / 10.0
            elif v == "langevin":
                v = langevin_noise
            data[section][k] = v
    return from_dict(data)


def stability(losses: list[float], window: int = 50) -> tuple[int, bool]:
    """(spike count, diverged): a spike is a loss above twice the running median of the last ``window``."""
    spikes = 0
    diverged = False
    for i, v in enumerate(losses):
        if not math.isfinite(v):
            diverged = True
            continue
        hist = [x for x in losses[max(0, i - window):i] if math.isfinite(x)]
        if len(hist) >= 5 and v > 2.0 * float(np.median(hist)):
            spikes += 1
    return spikes, diverged


def run_ablation_suite(base: TrainConfig, out_path, steps: int = 40, langevin_noise: float = 0.05) -> list[dict]:
    """Train every design-choice delta for ``steps`` steps and write the stability table as CSV."""
    rows = []
    for name, delta, ref_stable, ref_conv in ABLATIONS:
        rec = {"design_choice": name, "reference_stable_training": ref_stable, "reference_convergent": ref_conv,
               "error": ""}
        try:
            cfg = ablation_delta(base, delta, langevin_noise)
            trainer = Trainer(dataclasses.replace(cfg, eval_every=0), total_steps=steps)
            for _ in range(steps):
                trainer.train_step()
            losses = trainer.history
            spikes, diverged = stability(losses, base.spike_window)
            k = max(1, len(losses) // 10)
            head, tail = losses[:k], losses[-k:]
            convergent = (not diverged) and all(map(math.isfinite, tail)) and np.mean(tail) < np.mean(head)
            rec.update(loss_spikes=spikes, diverged=diverged, final_loss=float(np.mean(tail)),
                       stable_training=(spikes == 0 and not diverged), convergent=bool(convergent))
        except Exception as err:  # noqa: BLE001 - a failed run is a result, the suite continues
            log.exception("ablation %s failed", name)
            rec.update(loss_spikes=None, diverged=True, final_loss=float("nan"), stable_training=False,
                       convergent=False, error=f"{type(err).__name__}: {err}")
        rec["agrees_with_reference"] = (rec["stable_training"] == ref_stable and rec["convergent"] == ref_conv)
        rows.append(rec)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        fh.write("# stable_training: no loss above 2x running median (window %d) and no non-finite loss\n"
                 % base.spike_window)
        fh.write("# convergent: finite losses and mean of last 10%% of steps below mean of first 10%%\n")
        for na in NOT_APPLICABLE:
            fh.write(f"# not applicable: {na}\n")
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    mark = {True: "yes", False: "no"}
    lines = [f"{'design choice':<36} {'stable':>7} {'conv.':>6} {'spikes':>7} {'reference':>11} {'agree':>6}"]
    for r in rows:
        ref = f"{mark[r['reference_stable_training']]}/{mark[r['reference_convergent']]}"
        lines.append(
            f"{r['design_choice']:<36} {mark[r['stable_training']]:>7} {mark[r['convergent']]:>6} "
            f"{str(r['loss_spikes']):>7} {ref:>11} {mark[r['agrees_with_reference']]:>6}"
        )
    return "\n".join(lines)
