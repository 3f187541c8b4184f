"""Subnetwork data parallelism simulator.

N logical workers each train a fixed structured subnetwork of one shared
model; gradients are combined by masked averaging every step. The
package provides the float64 autograd core, mask construction for the
neuron (channel) and block strategies, the training engine, and the
alignment/memory diagnostics.
"""

from .autograd import Tape, Tensor, backward
from .config import DatasetConfig, ExperimentConfig, ModelConfig, load_config
from .data import Dataset, load_dataset, make_blobs, make_spirals
from .diagnostics import (
    AlignmentSample,
    MemoryReport,
    alignment_sweep,
    gradient_alignment,
    memory_report,
    restricted_cosine,
)
from .engine import AggregatedGradient, RunResult, WorkerReport, aggregate, run
from .masking import (
    MaskAssignment,
    StructuralUnit,
    WorkerMaskView,
    assign_units,
    build_assignment,
    induce_block_param_mask,
    induce_channel_param_mask,
    load_assignment,
    save_assignment,
    validate,
)
from .models import (
    build_mini_resnet,
    build_residual_mlp,
    evaluate_accuracy,
    flat_gradient,
    load_checkpoint,
    masked_forward,
    masked_kaiming_init,
    predict_logits,
    save_checkpoint,
)
from .optim import ScheduleSpec, flop_matched_epochs, lr_at, make_optimizer
from .topology import GlobalModel, ModelTopology

__version__ = "0.1.0"

__all__ = [
    "AggregatedGradient",
    "AlignmentSample",
    "Dataset",
    "DatasetConfig",
    "ExperimentConfig",
    "GlobalModel",
    "MaskAssignment",
    "MemoryReport",
    "ModelConfig",
    "ModelTopology",
    "RunResult",
    "ScheduleSpec",
    "StructuralUnit",
    "Tape",
    "Tensor",
    "WorkerMaskView",
    "WorkerReport",
    "aggregate",
    "alignment_sweep",
    "assign_units",
    "backward",
    "build_assignment",
    "build_mini_resnet",
    "build_residual_mlp",
    "evaluate_accuracy",
    "flat_gradient",
    "flop_matched_epochs",
    "gradient_alignment",
    "induce_block_param_mask",
    "induce_channel_param_mask",
    "load_assignment",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "lr_at",
    "make_blobs",
    "make_optimizer",
    "make_spirals",
    "masked_forward",
    "masked_kaiming_init",
    "memory_report",
    "predict_logits",
    "restricted_cosine",
    "run",
    "save_assignment",
    "save_checkpoint",
    "validate",
]
