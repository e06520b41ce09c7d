"""Request-centric Transformer ranking with structured sparse attention and MoE layers."""

__version__ = "0.1.0"

from .data import RequestSample, SynthConfig, generate_dataset, read_dataset, write_dataset  # noqa: E402
from .estimator import ItemPretrainer, SORTRanker, check_samples  # noqa: E402
from .model import ModelConfig, NextItemNetwork, SORTNetwork  # noqa: E402
from .training import compute_auc  # noqa: E402

__all__ = [
    "ItemPretrainer",
    "ModelConfig",
    "NextItemNetwork",
    "RequestSample",
    "SORTNetwork",
    "SORTRanker",
    "SynthConfig",
    "check_samples",
    "compute_auc",
    "generate_dataset",
    "read_dataset",
    "write_dataset",
]
