"""Construction, induction, and validation of per-worker parameter masks.

Each structural unit (an output channel or a residual block) is assigned
to exactly ``replication`` of the ``n_workers`` workers. Assignments are
laid out on a cyclic slot schedule: unit j in permuted order occupies
workers ``(j*P + t) mod N`` for ``t in 0..P-1``. Because the slots are
consecutive integers taken mod N, per-worker loads can never differ by
more than one, and the P workers of one unit are always distinct.

Channel units additionally induce masks on downstream weight slices: a
dead output channel removes its own weight row, bias, and norm affine
entries, plus the input slice of the layer that consumes it. Where two
channel units govern the same weight entry (a row from one layer, an
input slice from the previous one), the entry is active only when both
units are, so its total coverage can drop below P; such entries simply
receive no update when no worker holds them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TopologyError, ValidationError
from .topology import ModelTopology

KIND_CHANNEL = "channel"
KIND_BLOCK = "block"
STRATEGIES = ("neuron", "block")


@dataclass(frozen=True, order=True)
class StructuralUnit:
    kind: str
    ref: str  # layer id for channels, block id for blocks
    index: int = -1  # channel index; -1 for blocks

    def key(self) -> str:
        if self.kind == KIND_BLOCK:
            return f"block:{self.ref}"
        return f"channel:{self.ref}:{self.index}"

    @staticmethod
    def from_key(key: str) -> "StructuralUnit":
        parts = key.split(":")
        if parts[0] == KIND_BLOCK and len(parts) == 2:
            return StructuralUnit(KIND_BLOCK, parts[1])
        if parts[0] == KIND_CHANNEL and len(parts) == 3:
            return StructuralUnit(KIND_CHANNEL, parts[1], int(parts[2]))
        raise ConfigError(f"unparseable unit key {key!r}")


def slot_windows(num_units: int, n_workers: int, replication: int) -> list[tuple[int, ...]]:
    """Worker windows for units 0..num_units-1 in layout order."""
    if not 1 <= replication <= n_workers:
        raise ConfigError(
            f"replication must satisfy 1 <= P <= N, got P={replication}, N={n_workers}"
        )
    windows = []
    for j in range(num_units):
        start = (j * replication) % n_workers
        windows.append(tuple(sorted((start + t) % n_workers for t in range(replication))))
    return windows


def assign_units(
    units: list[StructuralUnit],
    n_workers: int,
    replication: int,
    seed: int,
) -> dict[StructuralUnit, tuple[int, ...]]:
    """Assign each unit to exactly ``replication`` workers, balanced and seeded."""
    if not units:
        raise ConfigError("assign_units requires a non-empty unit list")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(units))
    windows = slot_windows(len(units), n_workers, replication)
    assignment: dict[StructuralUnit, tuple[int, ...]] = {}
    for j, unit_pos in enumerate(order):
        assignment[units[int(unit_pos)]] = windows[j]
    # Deterministic iteration order: original unit order, not permutation order.
    return {u: assignment[u] for u in units}


def assign_grouped_units(
    unit_groups: list[list[StructuralUnit]],
    n_workers: int,
    replication: int,
    seed: int,
) -> dict[StructuralUnit, tuple[int, ...]]:
    """Like :func:`assign_units`, but balanced within every group as well.

    Groups occupy consecutive ranges of the same global slot counter, so
    both the per-group and the overall per-worker loads stay within one
    of each other. Used to keep every norm group populated on every
    worker.
    """
    if not unit_groups or any(not g for g in unit_groups):
        raise ConfigError("assign_grouped_units requires non-empty groups")
    if not 1 <= replication <= n_workers:
        raise ConfigError(
            f"replication must satisfy 1 <= P <= N, got P={replication}, N={n_workers}"
        )
    rng = np.random.default_rng(seed)
    assignment: dict[StructuralUnit, tuple[int, ...]] = {}
    slot = 0
    for group in unit_groups:
        order = rng.permutation(len(group))
        for unit_pos in order:
            start = (slot * replication) % n_workers
            window = tuple(sorted((start + t) % n_workers for t in range(replication)))
            assignment[group[int(unit_pos)]] = window
            slot += 1
    return {u: assignment[u] for g in unit_groups for u in g}


def induce_channel_param_mask(
    topology: ModelTopology,
    channel_active: dict[str, np.ndarray],
) -> np.ndarray:
    """Expand per-layer channel masks [N, C] into parameter masks [N, d]."""
    known = {layer.layer_id for layer in topology.channel_layers}
    for layer_id in channel_active:
        if layer_id not in known:
            raise TopologyError(f"channel mask refers to undeclared layer {layer_id!r}")

    n_workers = next(iter(channel_active.values())).shape[0] if channel_active else 1
    masks = np.ones((n_workers, topology.total), dtype=bool)
    for layer in topology.channel_layers:
        active = channel_active.get(layer.layer_id)
        if active is None:
            continue
        if active.shape[1] != layer.channels:
            raise TopologyError(
                f"mask for {layer.layer_id} has {active.shape[1]} channels, layer has {layer.channels}"
            )
        for pname, axis in layer.own_slices + layer.consumer_slices:
            spec = topology.index.get(pname)
            if spec is None:
                raise TopologyError(f"layer {layer.layer_id} references unknown parameter {pname!r}")
            for i in range(n_workers):
                dead = np.nonzero(~active[i])[0]
                if dead.size == 0:
                    continue
                view = masks[i, spec.offset : spec.offset + spec.size].reshape(spec.shape)
                np.moveaxis(view, axis, 0)[dead] = False
    return masks


def induce_block_param_mask(topology: ModelTopology, block_active: np.ndarray) -> np.ndarray:
    """Expand per-block activity flags [N, num_blocks] into parameter masks [N, d]."""
    n_workers, n_blocks = block_active.shape
    if n_blocks != len(topology.blocks):
        raise TopologyError(
            f"block mask covers {n_blocks} blocks, topology declares {len(topology.blocks)}"
        )
    masks = np.ones((n_workers, topology.total), dtype=bool)
    for block in topology.blocks:
        inactive_workers = np.nonzero(~block_active[:, block.index])[0]
        if inactive_workers.size and not (block.maskable and block.has_skip):
            raise ConfigError(
                f"block {block.block_id} has no skip connection and cannot be masked"
            )
        for i in inactive_workers:
            for pname in block.param_names:
                masks[i, topology.slice_of(pname)] = False
    return masks


@dataclass(frozen=True)
class WorkerMaskView:
    """Everything one worker needs to run a masked forward pass."""

    worker_id: int
    param_mask: np.ndarray  # float64 [d], 0.0 or 1.0
    param_mask_bool: np.ndarray  # bool [d]
    channel_active: dict[str, np.ndarray]  # layer id -> bool [C]
    block_active: np.ndarray  # bool [num_blocks]

    @property
    def active_params(self) -> int:
        return int(self.param_mask_bool.sum())


@dataclass
class MaskAssignment:
    """Fixed unit-to-worker assignment plus the induced parameter masks."""

    n_workers: int
    replication: int
    strategy: str
    seed: int
    topology: ModelTopology
    unit_workers: dict[StructuralUnit, tuple[int, ...]]
    param_masks: np.ndarray  # bool [N, d]
    governors: np.ndarray  # int [d], number of units governing each parameter
    coverage: np.ndarray = field(init=False)  # int [d]
    divisor: np.ndarray = field(init=False)  # float64 [d], max(coverage, 1)

    def __post_init__(self):
        self.coverage = self.param_masks.sum(axis=0).astype(np.int64)
        self.divisor = np.maximum(self.coverage, 1).astype(np.float64)
        for arr in (self.param_masks, self.coverage, self.divisor, self.governors):
            arr.setflags(write=False)

    @property
    def always_active(self) -> np.ndarray:
        return self.governors == 0

    @property
    def dp_equivalent(self) -> bool:
        return self.replication == self.n_workers

    @property
    def uncovered_params(self) -> int:
        return int((self.coverage == 0).sum())

    def worker_view(self, worker_id: int) -> WorkerMaskView:
        if not 0 <= worker_id < self.n_workers:
            raise ConfigError(f"worker id {worker_id} outside [0, {self.n_workers})")
        channel_active = {
            layer.layer_id: np.ones(layer.channels, dtype=bool)
            for layer in self.topology.channel_layers
        }
        block_active = np.ones(len(self.topology.blocks), dtype=bool)
        for unit, workers in self.unit_workers.items():
            if unit.kind == KIND_CHANNEL:
                channel_active[unit.ref][unit.index] = worker_id in workers
            else:
                block = next(b for b in self.topology.blocks if b.block_id == unit.ref)
                block_active[block.index] = worker_id in workers
        for arr in channel_active.values():
            arr.setflags(write=False)
        block_active.setflags(write=False)
        mask_bool = self.param_masks[worker_id]
        return WorkerMaskView(
            worker_id=worker_id,
            param_mask=mask_bool.astype(np.float64),
            param_mask_bool=mask_bool,
            channel_active=channel_active,
            block_active=block_active,
        )

    def worker_views(self) -> list[WorkerMaskView]:
        return [self.worker_view(i) for i in range(self.n_workers)]

    def unit_counts(self) -> list[int]:
        counts = [0] * self.n_workers
        for workers in self.unit_workers.values():
            for i in workers:
                counts[i] += 1
        return counts

    def output_fraction(self, layer_id: str) -> float:
        """Mean fraction of active output units per worker for one layer."""
        if self.strategy != "neuron":
            return 1.0
        layer = self.topology.channel_layer(layer_id)
        if not layer.maskable:
            return 1.0
        active = np.zeros(self.n_workers)
        for unit, workers in self.unit_workers.items():
            if unit.kind == KIND_CHANNEL and unit.ref == layer_id:
                for i in workers:
                    active[i] += 1
        return float(active.mean() / layer.channels)


def _channel_unit_groups(topology: ModelTopology) -> list[list[StructuralUnit]]:
    groups: list[list[StructuralUnit]] = []
    for layer in topology.channel_layers:
        if not layer.maskable:
            continue
        gsize = layer.channels // layer.norm_groups
        for g in range(layer.norm_groups):
            groups.append(
                [
                    StructuralUnit(KIND_CHANNEL, layer.layer_id, c)
                    for c in range(g * gsize, (g + 1) * gsize)
                ]
            )
    return groups


def _governor_counts(topology: ModelTopology, strategy: str) -> np.ndarray:
    governors = np.zeros(topology.total, dtype=np.int64)
    if strategy == "neuron":
        for layer in topology.channel_layers:
            if not layer.maskable:
                continue
            for pname, _axis in layer.own_slices + layer.consumer_slices:
                governors[topology.slice_of(pname)] += 1
    else:
        for block in topology.blocks:
            if not block.maskable:
                continue
            for pname in block.param_names:
                governors[topology.slice_of(pname)] += 1
    return governors


def build_assignment(
    topology: ModelTopology,
    strategy: str,
    n_workers: int,
    replication: int,
    seed: int,
) -> MaskAssignment:
    """Construct the full per-worker mask set for one training run."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if not 1 <= replication <= n_workers:
        raise ConfigError(
            f"replication must satisfy 1 <= P <= N, got P={replication}, N={n_workers}"
        )

    if strategy == "neuron":
        groups = _channel_unit_groups(topology)
        if not groups:
            raise ConfigError("model declares no maskable channels for neuron masking")
        unit_workers = assign_grouped_units(groups, n_workers, replication, seed)
        channel_active = {
            layer.layer_id: np.ones((n_workers, layer.channels), dtype=bool)
            for layer in topology.channel_layers
            if layer.maskable
        }
        for unit, workers in unit_workers.items():
            inactive = [i for i in range(n_workers) if i not in workers]
            channel_active[unit.ref][inactive, unit.index] = False
        param_masks = induce_channel_param_mask(topology, channel_active)
    else:
        units = [
            StructuralUnit(KIND_BLOCK, block.block_id)
            for block in topology.blocks
            if block.maskable
        ]
        if not units:
            raise ConfigError("model declares no maskable blocks for block masking")
        unit_workers = assign_units(units, n_workers, replication, seed)
        block_active = np.ones((n_workers, len(topology.blocks)), dtype=bool)
        by_id = {b.block_id: b for b in topology.blocks}
        for unit, workers in unit_workers.items():
            inactive = [i for i in range(n_workers) if i not in workers]
            block_active[inactive, by_id[unit.ref].index] = False
        param_masks = induce_block_param_mask(topology, block_active)

    return MaskAssignment(
        n_workers=n_workers,
        replication=replication,
        strategy=strategy,
        seed=seed,
        topology=topology,
        unit_workers=unit_workers,
        param_masks=param_masks,
        governors=_governor_counts(topology, strategy),
    )


@dataclass
class MaskValidationReport:
    n_workers: int
    replication: int
    strategy: str
    dp_equivalent: bool
    unit_counts: list[int]
    active_param_counts: list[int]
    uncovered_params: int

    def to_dict(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "replication": self.replication,
            "strategy": self.strategy,
            "dp_equivalent": self.dp_equivalent,
            "unit_counts": self.unit_counts,
            "active_param_counts": self.active_param_counts,
            "uncovered_params": self.uncovered_params,
        }


def validate(assignment: MaskAssignment) -> MaskValidationReport:
    """Check every assignment invariant; raise ValidationError on failure."""
    errors: list[str] = []
    n, p = assignment.n_workers, assignment.replication
    topo = assignment.topology

    for unit, workers in assignment.unit_workers.items():
        if len(set(workers)) != p:
            errors.append(f"unit {unit.key()} is held by {len(set(workers))} workers, expected {p}")
        if any(not 0 <= w < n for w in workers):
            errors.append(f"unit {unit.key()} names a worker outside [0, {n})")

    coverage = assignment.coverage
    governors = assignment.governors
    always = governors == 0
    single = governors == 1
    if coverage[always].size and not np.all(coverage[always] == n):
        errors.append("an always-active parameter is missing from some worker mask")
    if coverage[single].size and not np.all(coverage[single] == p):
        bad = int(np.sum(coverage[single] != p))
        errors.append(f"{bad} unit-governed parameters have coverage != {p}")
    multi = governors >= 2
    if np.any(coverage[~multi] == 0):
        errors.append("a parameter governed by at most one unit has zero coverage")

    counts = assignment.unit_counts()
    if counts and max(counts) - min(counts) > 1:
        errors.append(f"per-worker unit loads are unbalanced: {counts}")

    if assignment.strategy == "neuron":
        views = assignment.worker_views()
        for layer in topo.channel_layers:
            gsize = layer.channels // layer.norm_groups
            for view in views:
                act = view.channel_active[layer.layer_id]
                for g in range(layer.norm_groups):
                    if not act[g * gsize : (g + 1) * gsize].any():
                        errors.append(
                            f"layer {layer.layer_id} group {g} has no active channel "
                            f"on worker {view.worker_id}"
                        )
    else:
        maskable = [b.index for b in topo.blocks if b.maskable]
        if maskable:
            views = assignment.worker_views()
            for view in views:
                if not view.block_active[maskable].any():
                    errors.append(f"worker {view.worker_id} holds no active block")

    if errors:
        raise ValidationError("; ".join(errors))

    return MaskValidationReport(
        n_workers=n,
        replication=p,
        strategy=assignment.strategy,
        dp_equivalent=assignment.dp_equivalent,
        unit_counts=counts,
        active_param_counts=[int(m.sum()) for m in assignment.param_masks],
        uncovered_params=assignment.uncovered_params,
    )


def assignment_to_dict(assignment: MaskAssignment) -> dict:
    return {
        "version": 1,
        "n_workers": assignment.n_workers,
        "replication": assignment.replication,
        "strategy": assignment.strategy,
        "seed": assignment.seed,
        "units": {unit.key(): list(workers) for unit, workers in assignment.unit_workers.items()},
    }


def save_assignment(assignment: MaskAssignment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(assignment_to_dict(assignment), indent=2, sort_keys=True))


def assignment_from_dict(doc: dict, topology: ModelTopology) -> MaskAssignment:
    strategy = doc["strategy"]
    n_workers = int(doc["n_workers"])
    unit_workers = {
        StructuralUnit.from_key(key): tuple(sorted(int(w) for w in workers))
        for key, workers in doc["units"].items()
    }
    if strategy == "neuron":
        channel_active = {
            layer.layer_id: np.ones((n_workers, layer.channels), dtype=bool)
            for layer in topology.channel_layers
            if layer.maskable
        }
        for unit, workers in unit_workers.items():
            if unit.ref not in channel_active:
                raise TopologyError(f"unit {unit.key()} refers to a non-maskable or unknown layer")
            inactive = [i for i in range(n_workers) if i not in workers]
            channel_active[unit.ref][inactive, unit.index] = False
        param_masks = induce_channel_param_mask(topology, channel_active)
    else:
        block_active = np.ones((n_workers, len(topology.blocks)), dtype=bool)
        by_id = {b.block_id: b for b in topology.blocks}
        for unit, workers in unit_workers.items():
            if unit.ref not in by_id:
                raise TopologyError(f"unit {unit.key()} refers to an unknown block")
            inactive = [i for i in range(n_workers) if i not in workers]
            block_active[inactive, by_id[unit.ref].index] = False
        param_masks = induce_block_param_mask(topology, block_active)
    return MaskAssignment(
        n_workers=n_workers,
        replication=int(doc["replication"]),
        strategy=strategy,
        seed=int(doc.get("seed", 0)),
        topology=topology,
        unit_workers=unit_workers,
        param_masks=param_masks,
        governors=_governor_counts(topology, strategy),
    )


def load_assignment(path: str | Path, topology: ModelTopology) -> MaskAssignment:
    return assignment_from_dict(json.loads(Path(path).read_text()), topology)
