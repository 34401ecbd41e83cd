"""Command line entry point: ``ebwm {train,eval,refine-demo,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .autodiff import NonFiniteError
from .config import ConfigError

log = logging.getLogger("ebwm")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def cmd_train(args) -> int:
    from .train import resolve_output, train

    cfg = config_mod.load(args.config, args.overrides)
    trainer, rows = train(cfg, steps=args.steps)
    last_val = next((r for r in reversed(rows) if r.split == "val"), None)
    _emit({
        "command": "train",
        "steps": trainer.step,
        "metrics": str(resolve_output(cfg.metrics_path)),
        "checkpoint": str(resolve_output(cfg.checkpoint_path)),
        "val_loss": last_val.loss if last_val else None,
        "aborted_steps": sum(r.status != "ok" for r in rows),
    })
    return 0


def _eval_source(cfg, dataset_path):
    from .train import DataSource

    if dataset_path:
        if not Path(dataset_path).exists():
            raise FileNotFoundError(dataset_path)
        cfg.dataset.path = str(dataset_path)
    return DataSource(cfg)


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    model, cfg = load_model(_existing(args.checkpoint))
    source = _eval_source(cfg, args.dataset)
    res = evaluate(model, cfg, source.val_batches(args.batches, args.batch_size or cfg.batch_size))
    _emit({"command": "eval", "checkpoint": args.checkpoint, **res})
    return 0


def cmd_refine_demo(args) -> int:
    from .ebt import EnergyTransformer
    from .train import ebwm_predict, load_model

    model, cfg = load_model(_existing(args.checkpoint))
    if not isinstance(model, EnergyTransformer):
        raise ValueError("refine-demo needs an ebwm checkpoint")
    batch = _eval_source(cfg, args.dataset).val_batches(1, args.batch_size)[0]
    _, trace = ebwm_predict(model, batch, np.random.default_rng(args.seed), steps=args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.write(out)
    _emit({"command": "refine-demo", "trace": str(out), "steps": len(trace),
           "first_energy": trace.first_energy, "last_energy": trace.last_energy})
    return 0


def cmd_ablate(args) -> int:
    from .train import format_ablation_table, run_ablation_suite

    cfg = config_mod.load(args.config, args.overrides)
    rows = run_ablation_suite(cfg, args.out, steps=args.steps, langevin_noise=args.langevin_noise)
    print(format_ablation_table(rows), flush=True)
    _emit({"command": "ablate", "report": args.out, "rows": len(rows),
           "diverged": sum(bool(r["diverged"]) for r in rows)})
    return 0


def cmd_report(args) -> int:
    from .report import render, summary_line

    files, summary = render(_existing(args.metrics), args.out_dir)
    print(summary_line(summary), flush=True)
    _emit({"command": "report", "plots": [str(f) for f in files], **summary})
    return 0


def _existing(path) -> str:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebwm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config")
    t.add_argument("overrides", nargs="*", help="dotted key=value overrides, values parsed as JSON")
    t.add_argument("--steps", type=int, default=None, help="override max_steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="validation metrics of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", default=None, help="text corpus file (discrete checkpoints)")
    e.add_argument("--batches", type=int, default=4)
    e.add_argument("--batch-size", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine-demo", help="export one refinement trace as NDJSON")
    r.add_argument("checkpoint")
    r.add_argument("--dataset", default=None)
    r.add_argument("--out", default="refine_trace.ndjson")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--batch-size", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_refine_demo)

    a = sub.add_parser("ablate", help="run the design-choice ablation suite")
    a.add_argument("config")
    a.add_argument("overrides", nargs="*")
    a.add_argument("--steps", type=int, default=40)
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--langevin-noise", type=float, default=0.05)
    a.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="plot a metrics CSV")
    rp.add_argument("metrics")
    rp.add_argument("--out-dir", default="plots")
    rp.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail("config", err.message, key=err.key)
    except FileNotFoundError as err:
        return _fail("missing-file", "file not found", path=str(err.filename or err.args[0]))
    except NonFiniteError as err:
        return _fail("non-finite", str(err))
    except (ValueError, KeyError) as err:
        return _fail("invalid", str(err))


if __name__ == "__main__":
    sys.exit(main())
