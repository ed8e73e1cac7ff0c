"""Desk-scale laboratory for merging networks trained under controlled SGD noise."""
from .analysis import (
    MergeReport,
    SweepPoint,
    alpha_sweep,
    classify_transition,
    collapse_score,
    hessian_top_eigs,
    interior_peak,
    loss_plane,
    performance_gain,
)
from .merge import apply_merge, linear_interpolate, recompute_statistics, task_arithmetic_merge, task_vector
from .nets import ArchDescriptor, ParamVector, build, evaluate, forward, mlp, tiny_cnn
from .optim import TrainConfig, effective_noise, gradient_noise_trace, lr_at, sgd_step
from .protocol import BifurcationPlan, Checkpoint, bifurcate, run_bifurcation_experiment, train_trunk

__all__ = [
    "ArchDescriptor",
    "BifurcationPlan",
    "Checkpoint",
    "MergeReport",
    "ParamVector",
    "SweepPoint",
    "TrainConfig",
    "alpha_sweep",
    "apply_merge",
    "bifurcate",
    "build",
    "classify_transition",
    "collapse_score",
    "effective_noise",
    "evaluate",
    "forward",
    "gradient_noise_trace",
    "hessian_top_eigs",
    "interior_peak",
    "linear_interpolate",
    "loss_plane",
    "lr_at",
    "mlp",
    "performance_gain",
    "recompute_statistics",
    "run_bifurcation_experiment",
    "sgd_step",
    "task_arithmetic_merge",
    "task_vector",
    "tiny_cnn",
    "train_trunk",
]
