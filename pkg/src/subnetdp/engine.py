"""The N-worker training protocol.

Each step fans out to the workers: every worker samples its own batch,
runs a forward/backward pass on its masked parameter vector, and hands
back a gradient aligned with the flat theta. Gradients are combined by
masked averaging (per-parameter mean over the workers whose masks hold
that parameter, accumulated in ascending worker order so the reduction
is bitwise deterministic), and a single optimizer update is applied to
the one canonical theta that all workers share. Held-out evaluation
always runs on the full, unmasked model.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, load_dataset
from .diagnostics import AlignmentSample, gradient_alignment
from .errors import InputError, NumericalError, ProtocolError
from .masking import MaskAssignment, build_assignment, save_assignment, validate
from .models import evaluate_accuracy, flat_gradient, masked_forward, masked_kaiming_init
from .optim import flop_matched_epochs, lr_at, make_optimizer
from .topology import GlobalModel

METRICS_HEADER = (
    "step,epoch,lr,train_loss_mean,eval_acc,active_params_mean,alignment_block_or_neuron_mean"
)
ALIGNMENT_HEADER = "step,worker,layer,strategy,overlap,cosine"


@dataclass
class WorkerState:
    worker_id: int
    view: object  # WorkerMaskView
    rng: np.random.Generator


@dataclass
class WorkerReport:
    worker_id: int
    loss: float
    grad: np.ndarray
    active_params: int
    alignment: list[AlignmentSample] = field(default_factory=list)


@dataclass
class AggregatedGradient:
    gbar: np.ndarray
    divisor: np.ndarray


def aggregate(grads: list[np.ndarray], assignment: MaskAssignment) -> AggregatedGradient:
    """Masked averaging: gbar_j = sum_i m_ij g_ij / sum_i m_ij.

    Workers are accumulated in ascending id order. Parameters that no
    worker holds (possible only for weight entries governed by two
    channel units at once) receive a zero update.
    """
    if len(grads) != assignment.n_workers:
        raise ProtocolError(
            f"aggregate received {len(grads)} gradients for {assignment.n_workers} workers"
        )
    num = np.zeros(assignment.topology.total, dtype=np.float64)
    for i in range(assignment.n_workers):
        num += assignment.param_masks[i] * grads[i]
    gbar = num / assignment.divisor
    if assignment.uncovered_params:
        uncovered = assignment.coverage == 0
        if np.any(num[uncovered] != 0.0):
            raise ProtocolError("a gradient reached a parameter with zero mask coverage")
    return AggregatedGradient(gbar=gbar, divisor=assignment.divisor)


@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float | None
    train_loss_mean: float | None
    eval_acc: float | None
    active_params_mean: float | None
    alignment_mean: float | None

    def to_csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            return repr(v) if isinstance(v, float) else str(v)

        return ",".join(
            fmt(v)
            for v in (
                self.step, self.epoch, self.lr, self.train_loss_mean,
                self.eval_acc, self.active_params_mean, self.alignment_mean,
            )
        )


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    alignment: list[AlignmentSample]
    summary: dict
    theta: np.ndarray
    model: GlobalModel
    assignment: MaskAssignment
    out_dir: Path | None = None

    def metrics_csv(self) -> str:
        return "\n".join([METRICS_HEADER] + [row.to_csv() for row in self.rows]) + "\n"


def _worker_step(
    model: GlobalModel,
    state: WorkerState,
    dataset: Dataset,
    batch_size: int,
    step: int,
    alignment_layers: tuple[str, ...],
    want_alignment: bool,
) -> WorkerReport:
    idx = state.rng.integers(0, len(dataset.train_x), size=batch_size)
    xs = dataset.train_x[idx]
    ys = dataset.train_y[idx]
    loss, tape, params = masked_forward(model, state.view, xs, ys)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise NumericalError(f"worker {state.worker_id} produced a non-finite loss")
    grad = flat_gradient(model, tape, loss, params)
    samples: list[AlignmentSample] = []
    if want_alignment:
        samples = gradient_alignment(
            model, state.view, xs, ys, alignment_layers, g_mask=grad, step=step
        )
    return WorkerReport(
        worker_id=state.worker_id,
        loss=loss_value,
        grad=grad,
        active_params=state.view.active_params,
        alignment=samples,
    )


def run(config: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Execute one experiment; deterministic given the config seed."""
    dataset = load_dataset(config.dataset)
    model = config.model.build(config.seed)
    if dataset.sample_shape != model.topology.input_shape:
        raise InputError(
            f"dataset samples {dataset.sample_shape} do not fit model input "
            f"{model.topology.input_shape}"
        )
    if dataset.classes != model.arch.classes:
        raise InputError(
            f"dataset has {dataset.classes} classes, model head expects {model.arch.classes}"
        )

    assignment = build_assignment(model.topology, config.strategy, config.n, config.p, config.seed)
    report = validate(assignment)
    model.theta = masked_kaiming_init(model, assignment, config.seed)

    optimizer = make_optimizer(config.optimizer.kind, model.topology.total,
                               momentum=config.optimizer.momentum)

    steps_per_epoch = max(1, -(-len(dataset.train_x) // (config.n * config.batch_per_worker)))
    epochs = flop_matched_epochs(config.e_full, config.n, config.p) if config.e_full >= 1 else 0
    total_steps = epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)

    seq = np.random.SeedSequence(config.seed)
    streams = seq.spawn(config.n)
    workers = [
        WorkerState(i, assignment.worker_view(i), np.random.default_rng(streams[i]))
        for i in range(config.n)
    ]
    alignment_layers = config.alignment_layers or (model.topology.default_alignment_layer,)
    active_mean = float(np.mean(report.active_param_counts))
    overlap = config.p / config.n

    rows: list[MetricsRow] = []
    all_alignment: list[AlignmentSample] = []
    rows.append(MetricsRow(0, 0, None, None,
                           evaluate_accuracy(model, dataset.test_x, dataset.test_y),
                           None, None))

    pool = (
        concurrent.futures.ThreadPoolExecutor(max_workers=config.threads)
        if config.threads > 1
        else None
    )
    try:
        for t in range(total_steps):
            lr = lr_at(config.schedule, t, total_steps)
            want_alignment = bool(config.alignment_every) and t % config.alignment_every == 0
            try:
                if pool is None:
                    reports = [
                        _worker_step(model, w, dataset, config.batch_per_worker, t,
                                     alignment_layers, want_alignment)
                        for w in workers
                    ]
                else:
                    futures = [
                        pool.submit(_worker_step, model, w, dataset, config.batch_per_worker,
                                    t, alignment_layers, want_alignment)
                        for w in workers
                    ]
                    reports = [f.result() for f in futures]
            except NumericalError as exc:
                raise NumericalError(f"training aborted at step {t}: {exc}") from exc

            agg = aggregate([r.grad for r in reports], assignment)
            optimizer.update(model.theta, agg.gbar, lr)

            eval_acc = None
            if (t + 1) % steps_per_epoch == 0 or t + 1 == total_steps:
                eval_acc = evaluate_accuracy(model, dataset.test_x, dataset.test_y)

            alignment_mean = None
            if want_alignment:
                step_samples = [s for r in reports for s in r.alignment]
                all_alignment.extend(step_samples)
                values = [s.cosine for s in step_samples if s.cosine is not None]
                if values:
                    alignment_mean = float(np.mean(values))

            rows.append(MetricsRow(
                step=t + 1,
                epoch=t // steps_per_epoch + 1,
                lr=lr,
                train_loss_mean=float(np.mean([r.loss for r in reports])),
                eval_acc=eval_acc,
                active_params_mean=active_mean,
                alignment_mean=alignment_mean,
            ))
    finally:
        if pool is not None:
            pool.shutdown()

    eval_rows = [r.eval_acc for r in rows if r.eval_acc is not None]
    summary = {
        "strategy": config.strategy,
        "n": config.n,
        "p": config.p,
        "overlap": overlap,
        "seed": config.seed,
        "total_steps": total_steps,
        "steps_per_epoch": steps_per_epoch,
        "flop_matched_epochs": epochs,
        "final_eval_acc": eval_rows[-1] if eval_rows else None,
        "best_eval_acc": max(eval_rows) if eval_rows else None,
        "final_train_loss": rows[-1].train_loss_mean if total_steps else None,
        "active_params_mean": active_mean,
        "active_fraction_mean": active_mean / model.topology.total,
        "uncovered_params": assignment.uncovered_params,
        "dp_equivalent": assignment.dp_equivalent,
    }

    result = RunResult(
        config=config,
        rows=rows,
        alignment=all_alignment,
        summary=summary,
        theta=model.theta.copy(),
        model=model,
        assignment=assignment,
    )
    if out_dir is not None:
        result.out_dir = write_run_dir(result, Path(out_dir))
    return result


def write_run_dir(result: RunResult, out_dir: Path) -> Path:
    """Persist config copy, masks, metrics, summary, and alignment CSVs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(result.config.to_dict(), indent=2, sort_keys=True)
    )
    save_assignment(result.assignment, out_dir / "masks.json")
    (out_dir / "metrics.csv").write_text(result.metrics_csv())
    (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    if result.alignment:
        overlap = result.config.p / result.config.n
        lines = [ALIGNMENT_HEADER]
        for s in result.alignment:
            cos = "" if s.cosine is None else repr(s.cosine)
            lines.append(
                f"{s.step},{s.worker_id},{s.layer},{result.config.strategy},{overlap!r},{cos}"
            )
        (out_dir / "alignment.csv").write_text("\n".join(lines) + "\n")
    return out_dir
