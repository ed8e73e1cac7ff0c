"""SGD with momentum and decoupled weight decay, the WSD schedule, noise scales."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

import numpy as np

from mergelab import nets
from mergelab.data import AugmentSpec, Dataset, augment_with, Batch
from mergelab.nets import ParamVector
from mergelab.tensor_core import ShapeError

logger = logging.getLogger(__name__)

DECAY_SHAPES = ("one_minus_sqrt", "linear", "cosine")


class DivergenceError(ValueError):
    """Non-finite loss or gradient; ``step`` is the optimizer step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ScheduleSpec:
    """Warmup-stable-decay learning-rate schedule, in optimizer steps.

    ``decay_steps == 0`` means the schedule stays at the base rate after
    warmup (trunk runs).
    """

    warmup_steps: int = 0
    stable_steps: int = 0
    decay_steps: int = 0
    decay_shape: str = "one_minus_sqrt"

    def __post_init__(self) -> None:
        if min(self.warmup_steps, self.stable_steps, self.decay_steps) < 0:
            raise ValueError("Schedule phases must be non-negative")
        if self.decay_shape not in DECAY_SHAPES:
            raise ValueError(f"Unknown decay shape {self.decay_shape!r}")

    @property
    def decay_start(self) -> int:
        return self.warmup_steps + self.stable_steps

    @property
    def total_steps(self) -> int:
        return self.decay_start + self.decay_steps


def lr_at(schedule: ScheduleSpec, eta: float, step: int) -> float:
    if step < 0:
        raise ValueError(f"Step must be non-negative, got {step}")
    if step < schedule.warmup_steps:
        return eta * step / schedule.warmup_steps
    if step < schedule.decay_start or schedule.decay_steps == 0:
        return eta
    u = min((step - schedule.decay_start) / schedule.decay_steps, 1.0)
    if schedule.decay_shape == "linear":
        return eta * (1.0 - u)
    if schedule.decay_shape == "cosine":
        return eta * 0.5 * (1.0 + math.cos(math.pi * u))
    return eta * (1.0 - math.sqrt(u))


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    epochs: int = 1

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError(f"Learning rate must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"Momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"Weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError("Epoch count must be non-negative")

    @property
    def s_tilde(self) -> float:
        return effective_noise(self.eta, self.batch_size, self.momentum)

    def canonical(self) -> str:
        aug = self.augment
        sched = self.schedule
        return (
            f"eta={self.eta!r};B={self.batch_size};mu={self.momentum!r};wd={self.weight_decay!r};"
            f"aug={int(aug.enabled)},{aug.flip_prob!r},{aug.crop_pad},{aug.jitter!r};"
            f"sched={sched.warmup_steps},{sched.stable_steps},{sched.decay_steps},{sched.decay_shape};"
            f"epochs={self.epochs}"
        )


def config_hash(config: TrainConfig, arch: nets.ArchDescriptor, seed: int) -> int:
    text = f"{config.canonical()}|{arch.canonical()}|seed={int(seed)}"
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True, eq=False)
class OptimizerState:
    buffer: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> "OptimizerState":
        return cls(np.zeros_like(params.values), 0)


def sgd_update(
    values: np.ndarray,
    grad: np.ndarray,
    buffer: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
    mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """v ← μv + g; θ ← θ − lr·v − lr·λ·θ (decay on masked entries only)."""
    if not values.shape == grad.shape == buffer.shape:
        raise ShapeError(f"sgd_update: params {values.shape}, grads {grad.shape}, buffer {buffer.shape}")
    dtype = values.dtype
    grad = grad.astype(dtype, copy=False)
    new_buffer = momentum * buffer + grad if momentum else grad.copy()
    new_values = values - lr * new_buffer
    if weight_decay:
        decay = lr * weight_decay * values
        if mask is not None:
            decay = decay * mask.astype(dtype, copy=False)
        new_values = new_values - decay
    return new_values.astype(dtype, copy=False), new_buffer.astype(dtype, copy=False)


def sgd_step(
    params: ParamVector,
    grads: np.ndarray,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
    *,
    aux: Optional[np.ndarray] = None,
    checked: bool = False,
) -> tuple[ParamVector, OptimizerState]:
    """One optimizer step; ``aux`` carries new running statistics (never decayed)."""
    if grads.shape != params.values.shape:
        raise ShapeError(f"sgd_step: params {params.values.shape} vs grads {grads.shape}")
    if checked and not np.all(np.isfinite(grads)):
        raise DivergenceError("Non-finite gradient", state.step)
    values, buffer = sgd_update(
        params.values, grads, state.buffer, lr, momentum, weight_decay, nets.decay_mask(params.arch)
    )
    return params.with_values(values, aux), OptimizerState(buffer, state.step + 1)


# ----------------------------------------------------------------------
# Noise-scale quantities
def effective_noise(eta: float, batch_size: int, momentum: float) -> float:
    """Normalized noise proxy S̃ = η / (B·(1−μ)²)."""
    if batch_size < 1:
        raise ValueError(f"Batch size must be >= 1, got {batch_size}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"Momentum must be in [0, 1), got {momentum}")
    # decimal arithmetic on the shortest float reprs keeps hand-computed values exact
    one_minus = 1 - Decimal(repr(float(momentum)))
    return float(Decimal(repr(float(eta))) / (Decimal(int(batch_size)) * one_minus * one_minus))


def effective_lr(params: ParamVector, eta: float) -> dict[str, float]:
    """η / ‖θ_g‖² for every scale-invariant weight group (+inf for zero norm)."""
    out: dict[str, float] = {}
    for slot in nets.normalized_groups(params.arch):
        chunk = params.values[slot.offset : slot.offset + slot.size].astype(np.float64)
        norm_sq = float(chunk @ chunk)
        out[slot.name] = eta / norm_sq if norm_sq > 0 else math.inf
    return out


def per_example_gradients(params: ParamVector, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Matrix of eval-mode per-example gradients, one row per sample."""
    rows = []
    for i in range(labels.shape[0]):
        step = nets.loss_and_grad(params, inputs[i : i + 1], labels[i : i + 1], "eval")
        rows.append(step.grad.astype(np.float64))
    return np.stack(rows) if rows else np.zeros((0, len(params)))


def trace_from_gradients(grads: np.ndarray) -> float:
    """(1/(n−1))·Σ‖g_i − ḡ‖² over the rows of ``grads``."""
    grads = np.asarray(grads, dtype=np.float64)
    n = grads.shape[0]
    if n < 2:
        raise ValueError(f"Need at least 2 gradients, got {n}")
    centered = grads - grads.mean(axis=0)
    return float(np.sum(centered * centered) / (n - 1))


def gradient_noise_trace(
    params: ParamVector,
    dataset: Dataset,
    n_samples: int,
    rng: np.random.Generator,
    augment: Optional[AugmentSpec] = None,
) -> float:
    """Estimate tr Σ from per-example gradients of a random subset.

    With an enabled ``AugmentSpec`` each example is transformed first, so the
    estimate reflects the augmented covariance.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    if n_samples > len(dataset):
        raise ValueError(f"n_samples {n_samples} exceeds dataset size {len(dataset)}")
    idx = np.sort(rng.choice(len(dataset), size=n_samples, replace=False))
    batch = Batch(dataset.inputs[idx], dataset.labels[idx], idx)
    if augment is not None and augment.enabled:
        batch = augment_with(batch, augment, rng)
    grads = per_example_gradients(params, batch.inputs, batch.labels)
    return trace_from_gradients(grads)
