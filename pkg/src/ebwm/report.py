"""Loss curves from a metrics CSV."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import read_metrics  # noqa: E402


def _series(rows, split, x):
    pts = [(r[x], r["loss"]) for r in rows
           if r["split"] == split and r[x] is not None and r["loss"] is not None and math.isfinite(r["loss"])]
    return [p[0] for p in pts], [p[1] for p in pts]


def summarize(rows) -> dict:
    out = {"rows": len(rows)}
    for split in ("train", "val"):
        losses = [r["loss"] for r in rows if r["split"] == split and r["loss"] is not None and math.isfinite(r["loss"])]
        out[f"min_{split}_loss"] = min(losses) if losses else None
    copies = [r["copy_baseline_score"] for r in rows if r["split"] == "val" and r["copy_baseline_score"] is not None]
    out["copy_baseline_score"] = copies[-1] if copies else None
    return out


def summary_line(summary: dict) -> str:
    parts = [f"rows={summary['rows']}"]
    for k in ("min_train_loss", "min_val_loss", "copy_baseline_score"):
        v = summary[k]
        parts.append(f"{k}={'nan' if v is None else format(v, '.6g')}")
    return " ".join(parts)


def render(metrics_path, out_dir) -> tuple[list[Path], dict]:
    """Write loss-vs-steps and loss-vs-flops PNGs; returns (files, summary)."""
    rows = read_metrics(metrics_path)
    if not rows:
        raise ValueError(f"{metrics_path}: no metric rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(metrics_path).stem
    files = []
    for x, label, log_x in (("step", "optimizer step", False), ("cumulative_flops", "cumulative FLOPs", True)):
        fig, ax = plt.subplots(figsize=(6, 4))
        for split, style in (("train", "-"), ("val", "o-")):
            xs, ys = _series(rows, split, x)
            if xs:
                ax.plot(xs, ys, style, label=split, markersize=3)
        copies = [r["copy_baseline_score"] for r in rows if r["copy_baseline_score"] is not None]
        if copies:
            ax.axhline(copies[-1], color="grey", linestyle="--", label="copy baseline")
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(label)
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{stem}_loss_vs_{'steps' if x == 'step' else 'flops'}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)
    return files, summarize(rows)
