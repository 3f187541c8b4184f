"""Structural metadata that connects models to the masking machinery.

A model topology declares how the flat parameter vector decomposes into
named tensors, which output channels form maskable units, which weight
slices each channel mask governs, and which residual blocks can be
dropped wholesale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    offset: int
    size: int
    kind: str  # conv_w | linear_w | bias | gamma | beta
    layer_id: str  # channel layer owning the output units


@dataclass(frozen=True)
class ChannelLayerSpec:
    """One layer whose output channels are structural units.

    ``own_slices`` lists (param name, axis) pairs indexed by the layer's
    own output-channel mask: weight rows, bias entries, and the affine
    parameters of the normalization that follows. ``consumer_slices``
    lists the downstream weight slices deactivated when a channel dies
    (the next layer's input slice).
    """

    layer_id: str
    channels: int
    norm_groups: int
    maskable: bool
    own_slices: tuple[tuple[str, int], ...]
    consumer_slices: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class BlockSpec:
    block_id: str
    index: int
    param_names: tuple[str, ...]
    has_skip: bool
    maskable: bool
    activation_per_sample: int  # elements the block materializes per input sample


@dataclass
class ModelTopology:
    params: tuple[ParamSpec, ...]
    channel_layers: tuple[ChannelLayerSpec, ...]
    blocks: tuple[BlockSpec, ...]
    base_activation_per_sample: int  # stem/head elements, materialized regardless of masks
    input_shape: tuple[int, ...]  # per-sample input shape
    default_alignment_layer: str
    index: dict[str, ParamSpec] = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        self.index = {p.name: p for p in self.params}
        self.total = sum(p.size for p in self.params)
        offsets = [p.offset for p in self.params]
        if offsets != sorted(offsets) or (self.params and self.params[0].offset != 0):
            raise ValueError("parameter specs must tile the flat vector in order")
        for a, b in zip(self.params, self.params[1:]):
            if a.offset + a.size != b.offset:
                raise ValueError(f"gap in parameter layout between {a.name} and {b.name}")

    def slice_of(self, name: str) -> slice:
        p = self.index[name]
        return slice(p.offset, p.offset + p.size)

    def channel_layer(self, layer_id: str) -> ChannelLayerSpec:
        for layer in self.channel_layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)


@dataclass
class GlobalModel:
    """The shared model: architecture, topology, and flat parameters."""

    arch: object
    topology: ModelTopology
    theta: np.ndarray

    def param_view(self, name: str) -> np.ndarray:
        p = self.topology.index[name]
        return self.theta[p.offset : p.offset + p.size].reshape(p.shape)
