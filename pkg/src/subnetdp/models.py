"""Desk-scale residual architectures with declared maskable structure.

Two model families cover both masking strategies: a mini residual CNN
(stem conv, K identical residual blocks of conv-GN-ReLU-conv-GN plus an
identity skip, global average pooling, linear head) and a residual MLP
(stem linear, K blocks of linear-ReLU-linear plus skip, linear head).

Conventions the masking module relies on:
  * stem and head parameters are always active on every worker;
  * a CNN block's conv1 channels govern conv2's input slice; conv2's own
    channels are maskable because the following group norm emits exact
    zeros for inactive channels, which keeps their gradients at zero;
  * MLP blocks have no normalization, so only the hidden (first linear)
    neurons are maskable there;
  * residual blocks keep their input shape, so every block may be
    dropped to an identity without breaking shape compatibility.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import ops
from .autograd import Tape, Tensor, backward
from .errors import ConfigError, DataError, InputError
from .masking import MaskAssignment, WorkerMaskView
from .topology import BlockSpec, ChannelLayerSpec, GlobalModel, ModelTopology, ParamSpec


class _TopologyBuilder:
    def __init__(self):
        self.specs: list[ParamSpec] = []
        self.offset = 0

    def add(self, name: str, shape: tuple[int, ...], kind: str, layer_id: str) -> None:
        size = int(np.prod(shape))
        self.specs.append(ParamSpec(name, shape, self.offset, size, kind, layer_id))
        self.offset += size


class MiniResNet:
    def __init__(
        self,
        channels: int,
        blocks: int,
        classes: int,
        norm_groups: int = 2,
        in_channels: int = 3,
        image_hw: tuple[int, int] = (8, 8),
    ):
        if blocks < 1:
            raise ConfigError(f"mini resnet needs at least one block, got {blocks}")
        if channels % norm_groups != 0:
            raise ConfigError(f"{norm_groups} norm groups do not divide {channels} channels")
        self.channels = channels
        self.blocks = blocks
        self.classes = classes
        self.norm_groups = norm_groups
        self.in_channels = in_channels
        self.image_hw = tuple(image_hw)
        self._all_channels = np.ones(channels, dtype=bool)

    def build_topology(self) -> ModelTopology:
        c, k, m = self.channels, self.blocks, self.classes
        h, w = self.image_hw
        tb = _TopologyBuilder()
        tb.add("stem.w", (c, self.in_channels, 3, 3), "conv_w", "stem")
        tb.add("stem.b", (c,), "bias", "stem")
        tb.add("stem_gn.gamma", (c,), "gamma", "stem")
        tb.add("stem_gn.beta", (c,), "beta", "stem")
        for i in range(k):
            tb.add(f"block{i}.conv1.w", (c, c, 3, 3), "conv_w", f"block{i}.conv1")
            tb.add(f"block{i}.conv1.b", (c,), "bias", f"block{i}.conv1")
            tb.add(f"block{i}.gn1.gamma", (c,), "gamma", f"block{i}.conv1")
            tb.add(f"block{i}.gn1.beta", (c,), "beta", f"block{i}.conv1")
            tb.add(f"block{i}.conv2.w", (c, c, 3, 3), "conv_w", f"block{i}.conv2")
            tb.add(f"block{i}.conv2.b", (c,), "bias", f"block{i}.conv2")
            tb.add(f"block{i}.gn2.gamma", (c,), "gamma", f"block{i}.conv2")
            tb.add(f"block{i}.gn2.beta", (c,), "beta", f"block{i}.conv2")
        tb.add("head.w", (m, c), "linear_w", "head")
        tb.add("head.b", (m,), "bias", "head")

        layers = [
            ChannelLayerSpec(
                "stem", c, self.norm_groups, False,
                (("stem.w", 0), ("stem.b", 0), ("stem_gn.gamma", 0), ("stem_gn.beta", 0)),
                (),
            )
        ]
        block_specs = []
        for i in range(k):
            layers.append(
                ChannelLayerSpec(
                    f"block{i}.conv1", c, self.norm_groups, True,
                    (
                        (f"block{i}.conv1.w", 0),
                        (f"block{i}.conv1.b", 0),
                        (f"block{i}.gn1.gamma", 0),
                        (f"block{i}.gn1.beta", 0),
                    ),
                    ((f"block{i}.conv2.w", 1),),
                )
            )
            layers.append(
                ChannelLayerSpec(
                    f"block{i}.conv2", c, self.norm_groups, True,
                    (
                        (f"block{i}.conv2.w", 0),
                        (f"block{i}.conv2.b", 0),
                        (f"block{i}.gn2.gamma", 0),
                        (f"block{i}.gn2.beta", 0),
                    ),
                    (),
                )
            )
            block_specs.append(
                BlockSpec(
                    block_id=f"block{i}",
                    index=i,
                    param_names=(
                        f"block{i}.conv1.w", f"block{i}.conv1.b",
                        f"block{i}.gn1.gamma", f"block{i}.gn1.beta",
                        f"block{i}.conv2.w", f"block{i}.conv2.b",
                        f"block{i}.gn2.gamma", f"block{i}.gn2.beta",
                    ),
                    has_skip=True,
                    maskable=True,
                    activation_per_sample=6 * c * h * w,
                )
            )
        layers.append(
            ChannelLayerSpec("head", m, 1, False, (("head.w", 0), ("head.b", 0)), ())
        )
        return ModelTopology(
            params=tuple(tb.specs),
            channel_layers=tuple(layers),
            blocks=tuple(block_specs),
            base_activation_per_sample=3 * c * h * w + c + m,
            input_shape=(self.in_channels, h, w),
            default_alignment_layer=f"block{k // 2}.conv2.w",
        )

    def forward(
        self,
        tape: Tape | None,
        params: dict[str, Tensor],
        x: Tensor,
        worker: WorkerMaskView | None = None,
        block_mode: str = "skip",
    ) -> Tensor:
        g = self.norm_groups
        h = ops.conv2d(tape, x, params["stem.w"], params["stem.b"], 1, 1)
        h = ops.group_norm(tape, h, g, params["stem_gn.gamma"], params["stem_gn.beta"],
                           self._all_channels)
        h = ops.relu(tape, h)
        for i in range(self.blocks):
            live = True if worker is None else bool(worker.block_active[i])
            if not live and block_mode == "skip":
                continue
            act1 = worker.channel_active[f"block{i}.conv1"] if worker else self._all_channels
            act2 = worker.channel_active[f"block{i}.conv2"] if worker else self._all_channels
            hb = ops.conv2d(tape, h, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"], 1, 1)
            hb = ops.group_norm(tape, hb, g, params[f"block{i}.gn1.gamma"],
                                params[f"block{i}.gn1.beta"], act1)
            hb = ops.relu(tape, hb)
            hb = ops.conv2d(tape, hb, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"], 1, 1)
            hb = ops.group_norm(tape, hb, g, params[f"block{i}.gn2.gamma"],
                                params[f"block{i}.gn2.beta"], act2)
            if not live:
                hb = ops.scale(tape, hb, 0.0)
            h = ops.add(tape, h, hb)
        pooled = ops.global_avg_pool(tape, h)
        return ops.linear(tape, pooled, params["head.w"], params["head.b"])


class ResidualMLP:
    def __init__(self, width: int, blocks: int, classes: int, in_dim: int = 16):
        if blocks < 1:
            raise ConfigError(f"residual mlp needs at least one block, got {blocks}")
        self.width = width
        self.blocks = blocks
        self.classes = classes
        self.in_dim = in_dim
        self._all_units = np.ones(width, dtype=bool)

    def build_topology(self) -> ModelTopology:
        w, k, m = self.width, self.blocks, self.classes
        tb = _TopologyBuilder()
        tb.add("stem.w", (w, self.in_dim), "linear_w", "stem")
        tb.add("stem.b", (w,), "bias", "stem")
        for i in range(k):
            tb.add(f"block{i}.lin1.w", (w, w), "linear_w", f"block{i}.lin1")
            tb.add(f"block{i}.lin1.b", (w,), "bias", f"block{i}.lin1")
            tb.add(f"block{i}.lin2.w", (w, w), "linear_w", f"block{i}.lin2")
            tb.add(f"block{i}.lin2.b", (w,), "bias", f"block{i}.lin2")
        tb.add("head.w", (m, w), "linear_w", "head")
        tb.add("head.b", (m,), "bias", "head")

        layers = [
            ChannelLayerSpec("stem", w, 1, False, (("stem.w", 0), ("stem.b", 0)), ()),
        ]
        block_specs = []
        for i in range(k):
            # Without a norm layer, masking lin2's output rows would leave
            # them with live gradients through the skip path, so only the
            # hidden units are structural units here.
            layers.append(
                ChannelLayerSpec(
                    f"block{i}.lin1", w, 1, True,
                    ((f"block{i}.lin1.w", 0), (f"block{i}.lin1.b", 0)),
                    ((f"block{i}.lin2.w", 1),),
                )
            )
            layers.append(
                ChannelLayerSpec(
                    f"block{i}.lin2", w, 1, False,
                    ((f"block{i}.lin2.w", 0), (f"block{i}.lin2.b", 0)),
                    (),
                )
            )
            block_specs.append(
                BlockSpec(
                    block_id=f"block{i}",
                    index=i,
                    param_names=(
                        f"block{i}.lin1.w", f"block{i}.lin1.b",
                        f"block{i}.lin2.w", f"block{i}.lin2.b",
                    ),
                    has_skip=True,
                    maskable=True,
                    activation_per_sample=4 * w,
                )
            )
        layers.append(ChannelLayerSpec("head", m, 1, False, (("head.w", 0), ("head.b", 0)), ()))
        return ModelTopology(
            params=tuple(tb.specs),
            channel_layers=tuple(layers),
            blocks=tuple(block_specs),
            base_activation_per_sample=2 * w + m,
            input_shape=(self.in_dim,),
            default_alignment_layer=f"block{k // 2}.lin1.w",
        )

    def forward(
        self,
        tape: Tape | None,
        params: dict[str, Tensor],
        x: Tensor,
        worker: WorkerMaskView | None = None,
        block_mode: str = "skip",
    ) -> Tensor:
        h = ops.relu(tape, ops.linear(tape, x, params["stem.w"], params["stem.b"]))
        for i in range(self.blocks):
            live = True if worker is None else bool(worker.block_active[i])
            if not live and block_mode == "skip":
                continue
            hb = ops.linear(tape, h, params[f"block{i}.lin1.w"], params[f"block{i}.lin1.b"])
            hb = ops.relu(tape, hb)
            hb = ops.linear(tape, hb, params[f"block{i}.lin2.w"], params[f"block{i}.lin2.b"])
            if not live:
                hb = ops.scale(tape, hb, 0.0)
            h = ops.add(tape, h, hb)
        return ops.linear(tape, h, params["head.w"], params["head.b"])


def masked_kaiming_init(
    model: GlobalModel,
    assignment: MaskAssignment | None,
    seed: int,
) -> np.ndarray:
    """Draw fresh parameters with fan-out rescaled by the active fraction.

    Weight tensors get zero-mean normals with variance 2/fan_out_active,
    where fan_out_active rounds fan_out times the mean fraction of active
    output units per worker. With no assignment (or one where every unit
    is replicated everywhere) this is classical Kaiming fan-out init.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(model.topology.total, dtype=np.float64)
    for spec in model.topology.params:
        sl = slice(spec.offset, spec.offset + spec.size)
        if spec.kind == "conv_w":
            fan_out = spec.shape[0] * spec.shape[2] * spec.shape[3]
        elif spec.kind == "linear_w":
            fan_out = spec.shape[0]
        elif spec.kind == "gamma":
            theta[sl] = 1.0
            continue
        else:  # bias, beta
            continue
        fraction = 1.0 if assignment is None else assignment.output_fraction(spec.layer_id)
        fan_active = max(1, round(fan_out * fraction))
        theta[sl] = rng.normal(0.0, math.sqrt(2.0 / fan_active), size=spec.size)
    return theta


def _make_global(arch) -> GlobalModel:
    topology = arch.build_topology()
    model = GlobalModel(arch=arch, topology=topology, theta=np.zeros(topology.total))
    return model


def build_mini_resnet(
    channels: int,
    blocks: int,
    classes: int,
    norm_groups: int = 2,
    in_channels: int = 3,
    image_hw: tuple[int, int] = (8, 8),
    seed: int = 0,
) -> GlobalModel:
    model = _make_global(MiniResNet(channels, blocks, classes, norm_groups, in_channels, image_hw))
    model.theta = masked_kaiming_init(model, None, seed)
    return model


def build_residual_mlp(
    width: int,
    blocks: int,
    classes: int,
    in_dim: int = 16,
    seed: int = 0,
) -> GlobalModel:
    model = _make_global(ResidualMLP(width, blocks, classes, in_dim))
    model.theta = masked_kaiming_init(model, None, seed)
    return model


def masked_forward(
    model: GlobalModel,
    worker: WorkerMaskView | None,
    xs: np.ndarray,
    ys: np.ndarray,
    block_mode: str = "skip",
    record: bool = True,
) -> tuple[Tensor, Tape | None, dict[str, Tensor]]:
    """One loss evaluation on the worker's masked parameter vector.

    With ``block_mode="skip"`` the operations of dropped blocks are never
    recorded (or executed), so their activations are never materialized.
    ``block_mode="multiply"`` computes every block and scales dropped
    outputs by zero instead; both paths produce identical losses.
    """
    if xs.shape[1:] != model.topology.input_shape:
        raise InputError(
            f"batch shape {xs.shape[1:]} does not match model input {model.topology.input_shape}"
        )
    if block_mode not in ("skip", "multiply"):
        raise ConfigError(f"unknown block_mode {block_mode!r}")
    tape = Tape() if record else None
    theta = model.theta if worker is None else model.theta * worker.param_mask
    params = {
        spec.name: Tensor(
            theta[spec.offset : spec.offset + spec.size].reshape(spec.shape),
            requires_grad=record,
        )
        for spec in model.topology.params
    }
    logits = model.arch.forward(tape, params, Tensor(np.asarray(xs, dtype=np.float64)),
                                worker, block_mode)
    loss = ops.softmax_cross_entropy(tape, logits, ys)
    return loss, tape, params


def flat_gradient(
    model: GlobalModel,
    tape: Tape,
    loss: Tensor,
    params: dict[str, Tensor],
) -> np.ndarray:
    """Backward pass assembled into a vector aligned with the flat theta."""
    grads = backward(tape, loss)
    flat = np.zeros(model.topology.total, dtype=np.float64)
    for spec in model.topology.params:
        g = grads.get(params[spec.name].tid)
        if g is not None:
            flat[spec.offset : spec.offset + spec.size] = np.asarray(g).reshape(-1)
    return flat


def predict_logits(model: GlobalModel, xs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Full-model logits, computed without any mask or tape."""
    params = {
        spec.name: Tensor(model.theta[spec.offset : spec.offset + spec.size].reshape(spec.shape))
        for spec in model.topology.params
    }
    outs = []
    for start in range(0, len(xs), batch_size):
        chunk = Tensor(np.asarray(xs[start : start + batch_size], dtype=np.float64))
        outs.append(model.arch.forward(None, params, chunk).data)
    return np.concatenate(outs, axis=0)


def evaluate_accuracy(model: GlobalModel, xs: np.ndarray, ys: np.ndarray,
                      batch_size: int = 256) -> float:
    logits = predict_logits(model, xs, batch_size=batch_size)
    return float((logits.argmax(axis=1) == np.asarray(ys)).mean())


def save_checkpoint(model: GlobalModel, prefix: str | Path) -> tuple[Path, Path]:
    """Write theta as little-endian float64 plus a JSON layout sidecar."""
    prefix = Path(prefix)
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    bin_path.write_bytes(model.theta.astype("<f8").tobytes())
    sidecar = {
        "dtype": "<f8",
        "total": model.topology.total,
        "params": {
            spec.name: {"offset": spec.offset, "shape": list(spec.shape)}
            for spec in model.topology.params
        },
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return bin_path, json_path


def load_checkpoint(prefix: str | Path) -> tuple[np.ndarray, dict]:
    """Read a checkpoint back; bit-exact with what was saved."""
    prefix = Path(prefix)
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    if not bin_path.exists() or not json_path.exists():
        raise DataError(f"checkpoint files {bin_path} / {json_path} not found")
    sidecar = json.loads(json_path.read_text())
    raw = bin_path.read_bytes()
    expected = sidecar["total"] * 8
    if len(raw) != expected:
        raise DataError(f"checkpoint {bin_path} holds {len(raw)} bytes, expected {expected}")
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return theta, sidecar["params"]
