"""Command-line front end.

Exit codes: 0 success, 2 configuration errors, 3 data errors,
4 numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .diagnostics import alignment_sweep, memory_report
from .errors import ConfigError, DataError, NumericalError
from .gradcheck import DEFAULT_TOL, run_all
from .masking import build_assignment, validate
from .optim import flop_matched_epochs


def _parse_overlaps(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--overlaps expects comma-separated integers, got {text!r}") from exc


def _apply_overrides(cfg, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        updates["threads"] = args.threads
    if getattr(args, "strategy", None) is not None:
        updates["strategy"] = args.strategy
    return cfg.replace(**updates) if updates else cfg


def _cmd_run(args) -> int:
    from .engine import run

    cfg = _apply_overrides(load_config(args.config), args)
    out_dir = Path(args.out) if args.out else Path("runs") / f"run-{cfg.strategy}-p{cfg.p}-s{cfg.seed}"
    result = run(cfg, out_dir=out_dir)
    print(f"run complete: {result.out_dir}")
    for key in ("strategy", "p", "n", "total_steps", "final_eval_acc", "final_train_loss"):
        print(f"  {key}: {result.summary[key]}")
    return 0


def _cmd_sweep(args) -> int:
    from .engine import run

    cfg = _apply_overrides(load_config(args.config), args)
    overlaps = _parse_overlaps(args.overlaps)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    out_dir = Path(args.out) if args.out else Path("runs") / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)

    table: dict[str, dict[int, float | None]] = {s: {} for s in strategies}
    for strategy in strategies:
        for p in overlaps:
            cell = run(
                cfg.replace(strategy=strategy, p=p),
                out_dir=out_dir / f"{strategy}-p{p}",
            )
            table[strategy][p] = cell.summary["final_eval_acc"]
            print(f"finished {strategy} P={p}: acc={cell.summary['final_eval_acc']}")

    header = ["strategy"] + [f"P/N={p / cfg.n:g}" for p in overlaps]
    lines = [",".join(header)]
    for strategy in strategies:
        cells = [
            "" if table[strategy][p] is None else f"{table[strategy][p]:.4f}"
            for p in overlaps
        ]
        lines.append(",".join([strategy] + cells))
    results_csv = out_dir / "results.csv"
    results_csv.write_text("\n".join(lines) + "\n")

    print()
    widths = [max(len(r.split(",")[i]) for r in lines) for i in range(len(header))]
    for line in lines:
        print("  ".join(cell.ljust(w) for cell, w in zip(line.split(","), widths)))
    print(f"\nresults table: {results_csv}")
    return 0


def _cmd_grad_check(args) -> int:
    ok, results = run_all(seed=args.seed if args.seed is not None else 0)
    for name, err in results:
        status = "PASS" if err < DEFAULT_TOL else "FAIL"
        print(f"{status}  {name}: max rel err {err:.3e}")
    if not ok:
        raise NumericalError("finite-difference check failed")
    return 0


def _cmd_validate_masks(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    model = cfg.model.build(cfg.seed)
    assignment = build_assignment(model.topology, cfg.strategy, cfg.n, cfg.p, cfg.seed)
    report = validate(assignment)
    print(json.dumps(report.to_dict(), indent=2))
    mem = memory_report(model.topology, assignment)
    print(f"active fraction mean: {mem.active_fraction_mean:.4f}")
    return 0


def _cmd_align(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    overlaps = _parse_overlaps(args.overlaps)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    rows = alignment_sweep(cfg, overlaps, strategies, steps=args.steps, every=args.every)
    out = Path(args.out) if args.out else Path("runs") / "alignment.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "worker", "layer", "strategy", "overlap", "cosine"])
        for row in rows:
            cos = "" if row["cosine"] is None else repr(row["cosine"])
            writer.writerow([row["step"], row["worker"], row["layer"],
                             row["strategy"], repr(row["overlap"]), cos])
    print(f"alignment sweep: {len(rows)} samples written to {out}")
    for strategy in strategies:
        for p in overlaps:
            values = [r["cosine"] for r in rows
                      if r["strategy"] == strategy and r["overlap"] == p / cfg.n
                      and r["cosine"] is not None]
            mean = f"{np.mean(values):+.4f}" if values else "n/a"
            print(f"  {strategy} P/N={p / cfg.n:g}: mean cosine {mean}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    metrics_path = run_dir / "metrics.csv"
    if not summary_path.exists() or not metrics_path.exists():
        raise DataError(f"{run_dir} does not look like a run directory (missing summary/metrics)")
    summary = json.loads(summary_path.read_text())
    with open(metrics_path) as fh:
        rows = list(csv.DictReader(fh))
    evals = [(int(r["step"]), float(r["eval_acc"])) for r in rows if r["eval_acc"]]
    losses = [float(r["train_loss_mean"]) for r in rows if r["train_loss_mean"]]
    print(f"run directory: {run_dir}")
    print(f"  strategy={summary['strategy']} P={summary['p']}/{summary['n']} seed={summary['seed']}")
    print(f"  steps: {summary['total_steps']} (epochs {summary['flop_matched_epochs']})")
    if losses:
        print(f"  train loss: first {losses[0]:.4f}, last {losses[-1]:.4f}")
    if evals:
        best = max(acc for _, acc in evals)
        print(f"  eval acc: final {evals[-1][1]:.4f}, best {best:.4f} over {len(evals)} evals")
    print(f"  active fraction mean: {summary['active_fraction_mean']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subnetdp",
        description="Train fixed structured subnetworks on N simulated workers "
                    "with masked gradient averaging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (1 = single-threaded reference mode)")
        p.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="execute one training run")
    common(p_run)
    p_run.add_argument("--strategy", choices=["neuron", "block"], default=None)

    p_sweep = sub.add_parser("sweep", help="FLOP-matched overlap grid, both strategies")
    common(p_sweep)
    p_sweep.add_argument("--overlaps", required=True, help="comma-separated P values, e.g. 8,7,6,5,4,3")
    p_sweep.add_argument("--strategies", default="neuron,block")

    p_gc = sub.add_parser("grad-check", help="finite-difference the operators and models")
    p_gc.add_argument("--seed", type=int, default=None)

    p_vm = sub.add_parser("validate-masks", help="build and validate the mask assignment")
    common(p_vm)
    p_vm.add_argument("--strategy", choices=["neuron", "block"], default=None)

    p_align = sub.add_parser("align", help="gradient-alignment sweep over overlaps")
    common(p_align)
    p_align.add_argument("--overlaps", required=True)
    p_align.add_argument("--strategies", default="neuron,block")
    p_align.add_argument("--steps", type=int, default=120)
    p_align.add_argument("--every", type=int, default=10)

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("run_dir")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "grad-check": _cmd_grad_check,
        "validate-masks": _cmd_validate_masks,
        "align": _cmd_align,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
