"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tape records one forward pass and is discarded after the backward
sweep. Construction order is topological by definition (an operation can
only consume tensors that already exist), so the backward sweep is a
single reverse walk that visits every node exactly once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, UsageError

Array = np.ndarray

_ids = itertools.count()

# Scan every op output for NaN/Inf. Cheap at the scales this package
# targets; set False to trade the safety net for speed.
CHECK_FINITE = True


class Tensor:
    """A float64 array plus an identity used for gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Array], tuple[Array | None, ...]]


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.nodes.append(TapeNode(inputs, output, backward))
        self._produced.add(output.tid)

    def produced(self, t: Tensor) -> bool:
        return t.tid in self._produced

    def activation_elements(self) -> int:
        """Total elements materialized by the recorded operations."""
        return sum(node.output.size for node in self.nodes)


def check_finite(name: str, out: Array) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericalError(f"{name} produced non-finite values")


def backward(tape: Tape, loss: Tensor) -> dict[int, Array]:
    """Reverse sweep from a scalar loss.

    Returns a map from tensor id to gradient for every leaf tensor with
    ``requires_grad`` that the loss depends on. Leaves the loss does not
    reach are simply absent (their gradient is zero).
    """
    if loss.data.shape != ():
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not tape.produced(loss):
        raise UsageError("loss was not produced by an operation recorded on this tape")

    pending: dict[int, Array] = {loss.tid: np.float64(1.0)}
    leaves: dict[int, Array] = {}
    for node in reversed(tape.nodes):
        grad_out = pending.pop(node.output.tid, None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(node.inputs, node.backward(grad_out)):
            if grad_in is None:
                continue
            bucket = leaves if not tape.produced(tensor) else pending
            seen = bucket.get(tensor.tid)
            bucket[tensor.tid] = grad_in if seen is None else seen + grad_in
    return leaves
