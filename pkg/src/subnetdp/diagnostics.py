"""Gradient-alignment and memory accounting diagnostics.

Alignment compares a worker's masked gradient with the gradient of the
unmasked model on the same batch and the same current parameters, both
restricted to the support of the worker's mask. Memory accounting is
analytic element counting: parameters, gradients, and optimizer state
scale with the active-parameter count, while activation savings come
from the blocks a worker never executes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masking import MaskAssignment, WorkerMaskView
from .models import flat_gradient, masked_forward
from .topology import GlobalModel, ModelTopology


@dataclass(frozen=True)
class AlignmentSample:
    step: int
    worker_id: int
    layer: str
    cosine: float | None
    reason: str | None = None  # set when cosine is absent


def restricted_cosine(
    g_masked: np.ndarray,
    g_unmasked: np.ndarray,
    support: np.ndarray,
) -> tuple[float | None, str | None]:
    """Cosine similarity over the support only; absent on degenerate input."""
    if not support.any():
        return None, "empty-support"
    a = g_masked[support]
    b = g_unmasked[support]
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None, "zero-norm"
    return float(np.dot(a, b) / (na * nb)), None


def gradient_alignment(
    model: GlobalModel,
    worker: WorkerMaskView,
    xs: np.ndarray,
    ys: np.ndarray,
    layers: tuple[str, ...] | list[str],
    g_mask: np.ndarray | None = None,
    step: int = 0,
) -> list[AlignmentSample]:
    """Per-layer cosine between masked and unmasked gradients.

    The unmasked pass reuses the worker's exact batch and the current
    global parameters. Pass ``g_mask`` to reuse a gradient the caller
    already computed for this batch.
    """
    if g_mask is None:
        loss_m, tape_m, params_m = masked_forward(model, worker, xs, ys)
        g_mask = flat_gradient(model, tape_m, loss_m, params_m)
    loss_u, tape_u, params_u = masked_forward(model, None, xs, ys)
    g_unmask = flat_gradient(model, tape_u, loss_u, params_u)

    samples = []
    for layer in layers:
        sl = model.topology.slice_of(layer)
        cosine, reason = restricted_cosine(
            g_mask[sl], g_unmask[sl], worker.param_mask_bool[sl]
        )
        samples.append(AlignmentSample(step, worker.worker_id, layer, cosine, reason))
    return samples


@dataclass
class WorkerMemory:
    worker_id: int
    active_params: int
    inactive_params: int
    active_fraction: float
    param_savings: float  # also the gradient and optimizer-state savings
    activation_elements_masked: int
    activation_elements_full: int
    activation_savings: float


@dataclass
class MemoryReport:
    total_params: int
    workers: list[WorkerMemory]

    @property
    def active_fraction_mean(self) -> float:
        return float(np.mean([w.active_fraction for w in self.workers]))

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "active_fraction_mean": self.active_fraction_mean,
            "workers": [vars(w) for w in self.workers],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def memory_report(topology: ModelTopology, assignment: MaskAssignment) -> MemoryReport:
    """Per-worker accounting of parameter and activation footprints."""
    full_act = topology.base_activation_per_sample + sum(
        b.activation_per_sample for b in topology.blocks
    )
    workers = []
    for i in range(assignment.n_workers):
        view = assignment.worker_view(i)
        active = view.active_params
        fraction = active / topology.total
        masked_act = topology.base_activation_per_sample + sum(
            b.activation_per_sample
            for b in topology.blocks
            if view.block_active[b.index]
        )
        workers.append(
            WorkerMemory(
                worker_id=i,
                active_params=active,
                inactive_params=topology.total - active,
                active_fraction=fraction,
                param_savings=1.0 - fraction,
                activation_elements_masked=masked_act,
                activation_elements_full=full_act,
                activation_savings=1.0 - masked_act / full_act,
            )
        )
    return MemoryReport(total_params=topology.total, workers=workers)


def alignment_sweep(
    base_config,
    overlaps: list[int],
    strategies: tuple[str, ...] = ("neuron", "block"),
    steps: int = 120,
    every: int = 10,
    seeds: tuple[int, ...] | None = None,
) -> list[dict]:
    """Short training runs logging alignment for each (P, strategy) cell.

    Returns flat rows ready for the alignment CSV: step, worker, layer,
    strategy, overlap, cosine (empty when absent).
    """
    from .engine import run  # local import, engine depends on this module

    seeds = seeds or (base_config.seed,)
    rows: list[dict] = []
    for strategy in strategies:
        for p in overlaps:
            for seed in seeds:
                cfg = base_config.replace(
                    strategy=strategy, p=p, seed=seed,
                    alignment_every=every, max_steps=steps,
                )
                result = run(cfg)
                for s in result.alignment:
                    rows.append(
                        {
                            "step": s.step,
                            "worker": s.worker_id,
                            "layer": s.layer,
                            "strategy": strategy,
                            "overlap": p / cfg.n,
                            "seed": seed,
                            "cosine": s.cosine,
                        }
                    )
    return rows
