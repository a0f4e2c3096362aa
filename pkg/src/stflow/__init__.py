"""Conditional flow matching for multi-task satellite image time series."""

from .estimator import FlowEstimator
from .flow import SolverConfig, SolverDiverged, fm_loss, integrate, sample
from .model import ModelConfig, VelocityField, load_checkpoint, save_checkpoint

__all__ = [
    "FlowEstimator",
    "ModelConfig",
    "SolverConfig",
    "SolverDiverged",
    "VelocityField",
    "fm_loss",
    "integrate",
    "load_checkpoint",
    "sample",
    "save_checkpoint",
]

__version__ = "0.1.0"
