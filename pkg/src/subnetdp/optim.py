"""Learning-rate schedules, optimizer state, and compute matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, UsageError


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str  # cosine | multistep
    lr_max: float
    lr_min: float = 0.0
    warmup_fraction: float = 0.0
    milestones: tuple[float, ...] = ()
    decay: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "multistep"):
            raise ConfigError(f"schedule kind must be cosine or multistep, got {self.kind!r}")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min} and {self.lr_max}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        ms = self.milestones
        if any(not 0.0 < m < 1.0 for m in ms) or list(ms) != sorted(set(ms)):
            raise ConfigError(f"milestones must be strictly increasing within (0, 1), got {ms}")


def lr_at(schedule: ScheduleSpec, step: int, total_steps: int) -> float:
    """Learning rate for one optimizer step.

    Warmup ramps linearly from zero to lr_max over the first
    ``warmup_fraction`` of training. The cosine phase then lands exactly
    on lr_min at the final step; the multistep phase decays by ``decay``
    at each milestone fraction of total training.
    """
    if not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps})")
    warm = int(round(schedule.warmup_fraction * total_steps))
    if step < warm:
        return schedule.lr_max * step / warm
    if schedule.kind == "cosine":
        span = max(1, total_steps - 1 - warm)
        progress = (step - warm) / span
        return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (
            1.0 + math.cos(math.pi * progress)
        )
    progress = step / total_steps
    passed = sum(1 for m in schedule.milestones if progress >= m)
    return schedule.lr_max * schedule.decay**passed


def flop_matched_epochs(e_full: int, n_workers: int, replication: int) -> int:
    """Epochs needed at overlap P/N to spend the full-model compute budget."""
    if replication < 1 or replication > n_workers:
        raise ConfigError(
            f"replication must satisfy 1 <= P <= N, got P={replication}, N={n_workers}"
        )
    if e_full < 1:
        raise ConfigError(f"baseline epoch count must be at least 1, got {e_full}")
    return -(-e_full * n_workers // replication)


class SgdNesterov:
    """SGD with Nesterov momentum over the flat parameter vector."""

    kind = "sgd-nesterov"

    def __init__(self, dim: int, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = np.zeros(dim, dtype=np.float64)

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericalError("aggregated gradient contains non-finite values")
        mu = self.momentum
        self.velocity *= mu
        self.velocity += grad
        theta -= lr * (grad + mu * self.velocity)

    def state_elements(self) -> int:
        return self.velocity.size


class Adam:
    kind = "adam"

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim, dtype=np.float64)
        self.v = np.zeros(dim, dtype=np.float64)
        self.t = 0

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericalError("aggregated gradient contains non-finite values")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_elements(self) -> int:
        return self.m.size + self.v.size


def make_optimizer(kind: str, dim: int, momentum: float = 0.9):
    if kind == "sgd-nesterov":
        return SgdNesterov(dim, momentum=momentum)
    if kind == "adam":
        return Adam(dim)
    raise ConfigError(f"unknown optimizer kind {kind!r}")
