"""Parameter-space merging: linear interpolation and task arithmetic."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mergelab import nets
from mergelab.data import Dataset
from mergelab.nets import ArchMismatchError, ParamVector

logger = logging.getLogger(__name__)

STATS_POLICIES = ("interpolate", "recompute")
VAR_FLOOR = 1e-12
RECOMPUTE_BATCHES = 8

__all__ = [
    "ArchMismatchError",
    "MergeSpec",
    "linear_interpolate",
    "task_vector",
    "task_arithmetic_merge",
    "recompute_statistics",
    "apply_merge",
]


@dataclass(frozen=True)
class MergeSpec:
    method: str = "linear"
    alpha: float = 0.5
    coeffs: tuple[float, ...] = ()
    policy: str = "interpolate"

    def __post_init__(self) -> None:
        if self.method not in ("linear", "task_arithmetic"):
            raise ValueError(f"Unknown merge method {self.method!r}")
        if self.policy not in STATS_POLICIES:
            raise ValueError(f"Unknown statistics policy {self.policy!r}")


def _require_compatible(models: Sequence[ParamVector]) -> None:
    first = models[0]
    for other in models[1:]:
        first.require_compatible(other)


def _floor_variances(arch: nets.ArchDescriptor, aux: np.ndarray) -> np.ndarray:
    if aux.size:
        mask = nets.variance_mask(arch)
        aux[mask] = np.maximum(aux[mask], VAR_FLOOR)
    return aux


def linear_interpolate(
    theta_a: ParamVector,
    theta_b: ParamVector,
    alpha: float,
    *,
    policy: str = "interpolate",
    dataset: Optional[Dataset] = None,
    n_batches: int = RECOMPUTE_BATCHES,
) -> ParamVector:
    """(1−α)·θ_A + α·θ_B.

    The weights are computed as ``w_a = 1 − α`` and ``w_b = 1 − w_a`` so that
    swapping the endpoints together with ``α → 1 − α`` gives the same bits.
    α outside [0, 1] is allowed for landscape sweeps.
    """
    theta_a.require_compatible(theta_b)
    if policy not in STATS_POLICIES:
        raise ValueError(f"Unknown statistics policy {policy!r}")
    if alpha == 0.0:
        merged = theta_a.with_values(theta_a.values, theta_a.aux)
    elif alpha == 1.0:
        merged = theta_b.with_values(theta_b.values, theta_b.aux)
    else:
        w_a = 1.0 - alpha
        w_b = 1.0 - w_a
        values = w_a * theta_a.values + w_b * theta_b.values.astype(theta_a.dtype, copy=False)
        aux = w_a * theta_a.aux + w_b * theta_b.aux.astype(theta_a.dtype, copy=False)
        merged = theta_a.with_values(values, _floor_variances(theta_a.arch, aux))
    if policy == "recompute":
        if dataset is None:
            raise ValueError("The recompute policy needs a dataset")
        merged = recompute_statistics(merged, dataset, n_batches)
    return merged


def task_vector(theta_t: ParamVector, theta_base: ParamVector) -> ParamVector:
    """τ = θ_t − θ_base in 64-bit, carrying θ_t's running statistics."""
    theta_t.require_compatible(theta_base)
    diff = theta_t.values.astype(np.float64) - theta_base.values.astype(np.float64)
    return nets.ParamVector(theta_t.arch, diff, theta_t.aux.astype(np.float64))


def task_arithmetic_merge(
    theta_base: ParamVector,
    vectors: Sequence[ParamVector],
    coeffs: Sequence[float],
    *,
    policy: str = "interpolate",
    dataset: Optional[Dataset] = None,
    n_batches: int = RECOMPUTE_BATCHES,
) -> ParamVector:
    """θ_base + Σ αᵢ·τᵢ, accumulated in 64-bit and cast to the base dtype.

    Statistics come from the single task model when exactly one vector is
    merged with α = 1, otherwise from the base (or are recomputed).
    """
    if len(vectors) != len(coeffs) or not vectors:
        raise ValueError(f"Need matching non-empty vectors/coeffs, got {len(vectors)} and {len(coeffs)}")
    _require_compatible([theta_base, *vectors])
    if policy not in STATS_POLICIES:
        raise ValueError(f"Unknown statistics policy {policy!r}")
    total = theta_base.values.astype(np.float64)
    for tau, coeff in zip(vectors, coeffs):
        if coeff:
            total = total + float(coeff) * tau.values.astype(np.float64)
    if len(vectors) == 1 and float(coeffs[0]) == 1.0:
        aux = vectors[0].aux
    else:
        aux = theta_base.aux
    dtype = theta_base.dtype
    merged = theta_base.with_values(total.astype(dtype), _floor_variances(theta_base.arch, aux.astype(dtype)))
    if policy == "recompute":
        if dataset is None:
            raise ValueError("The recompute policy needs a dataset")
        merged = recompute_statistics(merged, dataset, n_batches)
    return merged


def recompute_statistics(
    theta: ParamVector,
    dataset: Dataset,
    n_batches: int = RECOMPUTE_BATCHES,
    *,
    batch_size: int = 256,
    seed: int = 0,
) -> ParamVector:
    """Replace running statistics with their average over train-mode passes.

    Batches come from a fixed permutation of ``dataset`` so repeated calls
    give identical statistics. Trainable values are untouched.
    """
    if not theta.arch.has_norm:
        return theta
    n = len(dataset)
    if n == 0:
        raise ValueError("Cannot recompute statistics on an empty dataset")
    if n_batches < 1:
        raise ValueError(f"n_batches must be >= 1, got {n_batches}")
    size = min(batch_size, n)
    order = np.random.default_rng(seed).permutation(n)
    running = np.zeros(theta.aux.shape, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_batches):
            start = (k * size) % n
            idx = np.take(order, np.arange(start, start + size), mode="wrap")
            stats = nets.forward(theta, dataset.inputs[idx], "train", stats_momentum=1.0).aux
            running += (stats.astype(np.float64) - running) / (k + 1)
    aux = _floor_variances(theta.arch, running.astype(theta.dtype))
    logger.debug("Recomputed statistics over %d batches of %d", n_batches, size)
    return theta.with_values(theta.values, aux)


def apply_merge(
    spec: MergeSpec,
    models: Sequence[ParamVector],
    *,
    base: Optional[ParamVector] = None,
    dataset: Optional[Dataset] = None,
) -> ParamVector:
    """Dispatch a :class:`MergeSpec` over endpoint or finetuned models."""
    if spec.method == "linear":
        if len(models) != 2:
            raise ValueError(f"Linear merging takes exactly two models, got {len(models)}")
        return linear_interpolate(models[0], models[1], spec.alpha, policy=spec.policy, dataset=dataset)
    if base is None:
        raise ValueError("Task arithmetic needs a base model")
    coeffs = spec.coeffs or tuple([spec.alpha] * len(models))
    vectors = [task_vector(m, base) for m in models]
    return task_arithmetic_merge(base, vectors, coeffs, policy=spec.policy, dataset=dataset)
