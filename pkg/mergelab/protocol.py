"""Trunk → checkpoint → decayed branches → merge protocol and task-arithmetic settings.

A trunk is trained at a constant learning rate (after warmup) and
checkpointed every few epochs. Every checkpoint is branched into two runs
under a decaying schedule that differ only in their random streams; the two
endpoints are merged and compared with the single models.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from mergelab import analysis, merge, nets
from mergelab.analysis import MergeReport, SweepPoint
from mergelab.data import AugmentSpec, Dataset, RngStream, TaskSplits, augment, combine, sample_batch, steps_per_epoch
from mergelab.nets import ArchDescriptor, ParamVector
from mergelab.optim import (
    DivergenceError,
    OptimizerState,
    ScheduleSpec,
    TrainConfig,
    config_hash,
    effective_lr,
    lr_at,
    sgd_step,
)
from mergelab.tensor_core import NonFiniteError
from utils.artifact_store import ArtifactStore, atomic_write_bytes

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"MLCK"
CKPT_VERSION = 1
# version 2 is the same layout with f64 arrays, written for 64-bit runs
CKPT_VERSION_F64 = 2
_ELEMENT = {CKPT_VERSION: "<f4", CKPT_VERSION_F64: "<f8"}
_HEAD = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_STREAMS = struct.Struct("<8Q")


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ----------------------------------------------------------------------
# Checkpoints
@dataclass(eq=False)
class Checkpoint:
    params: ParamVector
    state: OptimizerState
    data_state: tuple[int, int, int, int]
    augment_state: tuple[int, int, int, int]
    config_hash: int = 0

    @property
    def step(self) -> int:
        return self.state.step

    @property
    def epoch(self) -> int:
        return int(self.data_state[3])

    def to_bytes(self) -> bytes:
        arch_text = self.params.arch.canonical().encode("utf-8")
        version = CKPT_VERSION_F64 if self.params.values.dtype == np.float64 else CKPT_VERSION
        element = _ELEMENT[version]
        values = self.params.values.astype(element)
        parts = [
            _HEAD.pack(CKPT_MAGIC, version, self.config_hash),
            _U32.pack(len(arch_text)),
            arch_text,
            _U64.pack(self.step),
            _U64.pack(values.size),
            values.tobytes(),
            self.state.buffer.astype(element).tobytes(),
            _U64.pack(self.params.aux.size),
            self.params.aux.astype(element).tobytes(),
            _STREAMS.pack(*self.data_state, *self.augment_state),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        def need(offset: int, size: int) -> None:
            if len(blob) < offset + size:
                raise CheckpointFormatError("Truncated checkpoint", len(blob))

        need(0, _HEAD.size)
        magic, version, chash = _HEAD.unpack_from(blob, 0)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError("Bad magic, expected b'MLCK'", 0)
        if version not in _ELEMENT:
            raise CheckpointFormatError(f"Unsupported version {version}", 4)
        element = _ELEMENT[version]
        width = np.dtype(element).itemsize
        native = np.float64 if width == 8 else np.float32
        offset = _HEAD.size
        need(offset, _U32.size)
        (text_len,) = _U32.unpack_from(blob, offset)
        offset += _U32.size
        need(offset, text_len)
        arch = ArchDescriptor.from_canonical(blob[offset : offset + text_len].decode("utf-8"))
        offset += text_len
        need(offset, 2 * _U64.size)
        step, count = struct.unpack_from("<QQ", blob, offset)
        offset += 2 * _U64.size
        if count != nets.parameter_count(arch):
            raise CheckpointFormatError(f"Parameter count {count} does not match the architecture", offset - 8)
        need(offset, 2 * width * count)
        values = np.frombuffer(blob, dtype=element, count=count, offset=offset).astype(native)
        offset += width * count
        buffer = np.frombuffer(blob, dtype=element, count=count, offset=offset).astype(native)
        offset += width * count
        need(offset, _U64.size)
        (aux_count,) = _U64.unpack_from(blob, offset)
        offset += _U64.size
        need(offset, width * aux_count + _STREAMS.size)
        aux = np.frombuffer(blob, dtype=element, count=aux_count, offset=offset).astype(native)
        offset += width * aux_count
        streams = _STREAMS.unpack_from(blob, offset)
        params = ParamVector(arch, values, aux)
        return cls(params, OptimizerState(buffer, int(step)), tuple(streams[:4]), tuple(streams[4:]), int(chash))

    def save(self, path: Path | str, store: Optional[ArtifactStore] = None) -> Path:
        path = atomic_write_bytes(path, self.to_bytes())
        if store is not None:
            store.register(path)
        logger.info("Checkpoint written: %s (step %d)", path, self.step)
        return path

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        return cls.from_bytes(path.read_bytes())


@dataclass
class RunState:
    """Mutable state of one training run (owned by exactly one job)."""

    params: ParamVector
    opt: OptimizerState
    data_stream: RngStream
    augment_stream: RngStream

    @property
    def step(self) -> int:
        return self.opt.step

    @classmethod
    def start(cls, arch: ArchDescriptor, seed: int) -> "RunState":
        init = RngStream.from_seed(seed, "init")
        params = nets.build(arch, init.seed)
        return cls(
            params,
            OptimizerState.zeros(params),
            RngStream.from_seed(seed, "data"),
            RngStream.from_seed(seed, "augment"),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RunState":
        return cls(
            ckpt.params,
            OptimizerState(ckpt.state.buffer.copy(), ckpt.step),
            RngStream.from_state("data", ckpt.data_state),
            RngStream.from_state("augment", ckpt.augment_state),
        )

    def checkpoint(self, chash: int = 0) -> Checkpoint:
        return Checkpoint(
            self.params,
            OptimizerState(self.opt.buffer.copy(), self.opt.step),
            self.data_stream.state(),
            self.augment_stream.state(),
            chash,
        )


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    step: int
    lr: float
    loss: float
    eta_eff: dict[str, float] = field(default_factory=dict)


def run_epochs(
    run: RunState,
    config: TrainConfig,
    schedule: ScheduleSpec,
    dataset: Dataset,
    n_epochs: int,
    *,
    first_epoch: int = 0,
    checked: bool = False,
    on_epoch: Optional[Callable[[int, RunState], None]] = None,
) -> tuple[Optional[int], list[EpochLog]]:
    """Train ``run`` in place; returns the divergence step (or None) and epoch logs."""
    spe = steps_per_epoch(len(dataset), config.batch_size)
    logs: list[EpochLog] = []
    for e in range(n_epochs):
        total = 0.0
        lr = 0.0
        for _ in range(spe):
            batch = sample_batch(dataset, config.batch_size, run.data_stream)
            if config.augment.enabled:
                batch = augment(batch, config.augment, run.augment_stream)
            lr = lr_at(schedule, config.eta, run.step)
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
                    result = nets.loss_and_grad(run.params, batch.inputs, batch.labels, "train", checked=checked)
                    if not math.isfinite(result.loss) or not np.all(np.isfinite(result.grad)):
                        raise DivergenceError("Non-finite loss", run.step)
                    run.params, run.opt = sgd_step(
                        run.params,
                        result.grad,
                        run.opt,
                        lr,
                        config.momentum,
                        config.weight_decay,
                        aux=result.aux,
                        checked=checked,
                    )
            except (DivergenceError, NonFiniteError) as exc:
                logger.warning("Run diverged at step %d: %s", run.step, exc)
                return run.step, logs
            total += result.loss
        epoch = first_epoch + e + 1
        log = EpochLog(epoch, run.step, lr, total / spe, effective_lr(run.params, config.eta))
        logs.append(log)
        logger.debug("Epoch %d step %d lr %.5f loss %.4f", epoch, run.step, lr, log.loss)
        if on_epoch is not None:
            on_epoch(epoch, run)
    return None, logs


# ----------------------------------------------------------------------
# Plans
def trunk_config(
    eta: float,
    batch_size: int,
    n_train: int,
    *,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    augment_spec: Optional[AugmentSpec] = None,
    warmup_epochs: int = 1,
    epochs: int = 60,
) -> TrainConfig:
    """Constant-rate trunk config with warmup measured in whole epochs."""
    spe = steps_per_epoch(n_train, batch_size)
    return TrainConfig(
        eta=eta,
        batch_size=batch_size,
        momentum=momentum,
        weight_decay=weight_decay,
        augment=augment_spec or AugmentSpec(),
        schedule=ScheduleSpec(warmup_steps=warmup_epochs * spe),
        epochs=epochs,
    )


@dataclass(frozen=True)
class BifurcationPlan:
    """Trunk, branch and merge settings for one grid cell.

    ``budget="total"`` branches a checkpoint at epoch T_a for
    ``total_epochs − T_a`` epochs instead of a fixed ``decay_epochs``.
    """

    config: TrainConfig
    checkpoint_every: int = 5
    decay_epochs: int = 10
    decay_shape: str = "one_minus_sqrt"
    branch_seeds: tuple[int, int] = (1, 2)
    alpha: float = 0.5
    budget: str = "fixed"
    total_epochs: int = 0
    sweep_points: int = 21
    stats_policy: str = "interpolate"
    tau_rel: float = 0.05
    floor: float = 1e-3

    def __post_init__(self) -> None:
        if self.checkpoint_every < 1:
            raise ValueError("Checkpoint interval must be >= 1 epoch")
        if self.budget not in ("fixed", "total"):
            raise ValueError(f"Unknown budget mode {self.budget!r}")
        if self.budget == "total" and self.total_epochs <= self.config.epochs:
            raise ValueError("Total budget must exceed the trunk length")
        if self.decay_epochs < 0:
            raise ValueError("Decay epochs must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"Reported merges need alpha in [0, 1], got {self.alpha}")
        if self.sweep_points < 3:
            raise ValueError("The alpha sweep needs at least 3 points")

    def branch_epochs(self, checkpoint_epoch: int) -> int:
        if self.budget == "total":
            return max(self.total_epochs - checkpoint_epoch, 0)
        return self.decay_epochs


@dataclass
class TrunkResult:
    checkpoints: list[Checkpoint]
    diverged: bool = False
    diverged_step: Optional[int] = None
    log: list[EpochLog] = field(default_factory=list)
    steps_per_epoch: int = 0


def train_trunk(
    config: TrainConfig,
    dataset: Dataset,
    arch: ArchDescriptor,
    seed: int,
    *,
    checkpoint_every: int = 1,
    out_dir: Optional[Path] = None,
    store: Optional[ArtifactStore] = None,
    checked: bool = False,
) -> TrunkResult:
    """Warmup then constant-rate training for ``config.epochs`` epochs.

    A checkpoint is emitted every ``checkpoint_every`` epochs. Divergence
    stops the trunk; checkpoints taken so far are kept.
    """
    chash = config_hash(config, arch, seed)
    run = RunState.start(arch, seed)
    checkpoints: list[Checkpoint] = []

    def _on_epoch(epoch: int, state: RunState) -> None:
        if epoch % checkpoint_every:
            return
        ckpt = state.checkpoint(chash)
        checkpoints.append(ckpt)
        if out_dir is not None:
            ckpt.save(Path(out_dir) / f"trunk_e{epoch:04d}.ckpt", store)

    diverged_step, log = run_epochs(run, config, config.schedule, dataset, config.epochs, checked=checked, on_epoch=_on_epoch)
    if diverged_step is not None:
        logger.warning("Trunk diverged at step %d, keeping %d checkpoints", diverged_step, len(checkpoints))
    return TrunkResult(
        checkpoints,
        diverged_step is not None,
        diverged_step,
        log,
        steps_per_epoch(len(dataset), config.batch_size),
    )


def resume_trunk(checkpoint: Checkpoint, config: TrainConfig, dataset: Dataset, n_epochs: int) -> tuple[RunState, Optional[int]]:
    """Continue a trunk checkpoint under the trunk schedule."""
    run = RunState.from_checkpoint(checkpoint)
    diverged, _ = run_epochs(run, config, config.schedule, dataset, n_epochs, first_epoch=checkpoint.epoch)
    return run, diverged


# ----------------------------------------------------------------------
# Branches
@dataclass
class BranchResult:
    theta_a: ParamVector
    theta_b: ParamVector
    diverged_a: bool = False
    diverged_b: bool = False
    epochs: int = 0

    @property
    def diverged(self) -> bool:
        return self.diverged_a or self.diverged_b


def branch_schedule(checkpoint: Checkpoint, config: TrainConfig, epochs: int, spe: int, shape: str) -> ScheduleSpec:
    warmup = min(config.schedule.warmup_steps, checkpoint.step)
    return ScheduleSpec(
        warmup_steps=warmup,
        stable_steps=checkpoint.step - warmup,
        decay_steps=epochs * spe,
        decay_shape=shape,
    )


def _branch_seed(checkpoint: Checkpoint, seed: int) -> int:
    seq = np.random.SeedSequence([checkpoint.config_hash & 0xFFFFFFFF, checkpoint.config_hash >> 32, checkpoint.step, int(seed)])
    return int(seq.generate_state(1, np.uint64)[0])


def bifurcate(
    checkpoint: Checkpoint,
    plan: BifurcationPlan,
    dataset: Dataset,
    *,
    out_dir: Optional[Path] = None,
    store: Optional[ArtifactStore] = None,
    checked: bool = False,
) -> BranchResult:
    """Two decayed runs from one checkpoint that differ only in stream seeds.

    Both branches inherit parameters and momentum from the checkpoint.
    """
    config = plan.config
    spe = steps_per_epoch(len(dataset), config.batch_size)
    epochs = plan.branch_epochs(checkpoint.epoch)
    schedule = branch_schedule(checkpoint, config, epochs, spe, plan.decay_shape)
    endpoints: list[ParamVector] = []
    flags: list[bool] = []
    for tag, seed in zip("AB", plan.branch_seeds):
        derived = _branch_seed(checkpoint, seed)
        run = RunState(
            checkpoint.params,
            OptimizerState(checkpoint.state.buffer.copy(), checkpoint.step),
            RngStream.from_seed(derived, "data"),
            RngStream.from_seed(derived, "augment"),
        )
        diverged, _ = run_epochs(run, config, schedule, dataset, epochs, first_epoch=checkpoint.epoch, checked=checked)
        if diverged is not None:
            logger.warning("Branch %s from epoch %d diverged at step %d", tag, checkpoint.epoch, diverged)
        endpoints.append(run.params)
        flags.append(diverged is not None)
        if out_dir is not None:
            run.checkpoint(checkpoint.config_hash).save(Path(out_dir) / f"branch_{tag}_e{checkpoint.epoch:04d}.ckpt", store)
    return BranchResult(endpoints[0], endpoints[1], flags[0], flags[1], epochs)


# ----------------------------------------------------------------------
# Experiments
@dataclass
class ExperimentResult:
    reports: list[MergeReport]
    trunk: TrunkResult
    branches: dict[int, BranchResult] = field(default_factory=dict)


def _report_base(config_id: str, config: TrainConfig, seed: int, epoch: int, alpha: float) -> MergeReport:
    return MergeReport(
        config_id=config_id,
        s_tilde=config.s_tilde,
        checkpoint_epoch=epoch,
        eta=config.eta,
        batch_size=config.batch_size,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        augment=config.augment.label(),
        seed=seed,
        alpha=alpha,
    )


def merge_event(
    report: MergeReport,
    branches: BranchResult,
    splits: TaskSplits,
    plan: BifurcationPlan,
) -> MergeReport:
    """Fill ``report`` with merged/endpoint metrics, gains and the path shape."""
    merged = merge.linear_interpolate(
        branches.theta_a, branches.theta_b, plan.alpha, policy=plan.stats_policy, dataset=splits.train
    )
    test, train = splits.test, splits.train
    report.loss_merged, report.acc_merged = nets.evaluate(merged, test.inputs, test.labels)
    report.loss_a, report.acc_a = nets.evaluate(branches.theta_a, test.inputs, test.labels)
    report.loss_b, report.acc_b = nets.evaluate(branches.theta_b, test.inputs, test.labels)
    report.train_loss_merged, report.train_acc_merged = nets.evaluate(merged, train.inputs, train.labels)
    report.train_loss_a, report.train_acc_a = nets.evaluate(branches.theta_a, train.inputs, train.labels)
    report.train_loss_b, report.train_acc_b = nets.evaluate(branches.theta_b, train.inputs, train.labels)
    report.gain_mean = analysis.performance_gain(report.acc_merged, (report.acc_a, report.acc_b), "mean")
    report.gain_a = analysis.performance_gain(report.acc_merged, (report.acc_a,), "first")
    report.gain_b = analysis.performance_gain(report.acc_merged, (report.acc_b,), "first")
    grid = np.linspace(0.0, 1.0, plan.sweep_points).tolist()
    report.records = analysis.linear_path(
        branches.theta_a, branches.theta_b, train, grid, policy=plan.stats_policy, stats_data=train
    )
    shape = analysis.classify_transition(report.records, plan.tau_rel, plan.floor)
    report.barrier, report.dip, report.transition = shape.barrier, shape.dip, shape.kind
    return report


def run_bifurcation_experiment(
    plan: BifurcationPlan,
    splits: TaskSplits,
    arch: ArchDescriptor,
    seed: int,
    *,
    config_id: str = "c000",
    out_dir: Optional[Path] = None,
    store: Optional[ArtifactStore] = None,
    checked: bool = False,
    keep_branches: bool = False,
) -> ExperimentResult:
    """Trunk, branches and one merge event per checkpoint.

    A diverged trunk or branch still yields a report, flagged and with NaN
    metrics where no model exists.
    """
    config = plan.config
    trunk = train_trunk(
        config, splits.train, arch, seed, checkpoint_every=plan.checkpoint_every, out_dir=out_dir, store=store, checked=checked
    )
    result = ExperimentResult([], trunk)
    for ckpt in trunk.checkpoints:
        report = _report_base(config_id, config, seed, ckpt.epoch, plan.alpha)
        branches = bifurcate(ckpt, plan, splits.train, out_dir=out_dir, store=store, checked=checked)
        if keep_branches:
            result.branches[ckpt.epoch] = branches
        if branches.diverged:
            report.diverged = True
        else:
            merge_event(report, branches, splits, plan)
        result.reports.append(report)
        logger.info(
            "%s seed %d epoch %d: gain %.4f (%s)",
            config_id,
            seed,
            ckpt.epoch,
            report.gain_mean,
            report.transition or "diverged",
        )
    if trunk.diverged:
        epoch = trunk.diverged_step // max(trunk.steps_per_epoch, 1) + 1
        report = _report_base(config_id, config, seed, epoch, plan.alpha)
        report.diverged = True
        result.reports.append(report)
    return result


def pretrain_and_finetune(
    tasks: Sequence[TaskSplits],
    arch: ArchDescriptor,
    config: TrainConfig,
    seed: int,
    *,
    finetune_epochs: int,
    decay_shape: str = "one_minus_sqrt",
) -> tuple[ParamVector, list[ParamVector]]:
    """Shared base trained on all tasks, then one decayed finetune per task."""
    pooled = combine(*(t.train for t in tasks))
    run = RunState.start(arch, seed)
    diverged, _ = run_epochs(run, config, config.schedule, pooled, config.epochs)
    if diverged is not None:
        raise DivergenceError("Pretraining diverged", diverged)
    base = run.params
    finetuned = []
    for task in tasks:
        spe = steps_per_epoch(len(task.train), config.batch_size)
        schedule = ScheduleSpec(0, 0, finetune_epochs * spe, decay_shape)
        task_seed = int(np.random.SeedSequence([int(seed), task.train.task_id + 1]).generate_state(1, np.uint64)[0])
        ft = RunState(base, OptimizerState.zeros(base), RngStream.from_seed(task_seed, "data"), RngStream.from_seed(task_seed, "augment"))
        ft_diverged, _ = run_epochs(ft, config, schedule, task.train, finetune_epochs)
        if ft_diverged is not None:
            raise DivergenceError(f"Finetuning on task {task.train.task_id} diverged", ft_diverged)
        finetuned.append(ft.params)
    return base, finetuned


def run_task_arithmetic_setting(
    setting: str,
    *,
    base: ParamVector,
    finetuned: Sequence[ParamVector],
    eval_sets: Sequence[Dataset],
    grid: Sequence[float] = analysis.TASK_GRID,
    report: Optional[MergeReport] = None,
    policy: str = "interpolate",
) -> MergeReport:
    """α-curve of θ_base + α·Σ τᵢ with one shared coefficient.

    Setting ``b`` uses a trunk checkpoint as base and the two branch
    endpoints as finetuned models (both evaluated on the same set); setting
    ``a`` uses a multi-task base with one finetuned model and one evaluation
    set per task.
    """
    if setting not in ("a", "b"):
        raise ValueError(f"Unknown task-arithmetic setting {setting!r}")
    if setting == "b" and len(eval_sets) == 1:
        eval_sets = [eval_sets[0]] * len(finetuned)
    if len(eval_sets) != len(finetuned):
        raise ValueError(f"{len(finetuned)} finetuned models but {len(eval_sets)} evaluation sets")
    vectors = [merge.task_vector(m, base) for m in finetuned]
    singles = [nets.evaluate(m, d.inputs, d.labels)[1] for m, d in zip(finetuned, eval_sets)]
    pooled = eval_sets[0] if setting == "b" else combine(*eval_sets)

    def _at(alpha: float) -> ParamVector:
        return merge.task_arithmetic_merge(base, vectors, [alpha] * len(vectors), policy=policy, dataset=pooled)

    points: list[SweepPoint] = analysis.alpha_sweep(
        _at, grid, pooled, per_task=eval_sets, singles=singles if all(s > 0 for s in singles) else ()
    )
    report = report or MergeReport(config_id="ta", s_tilde=math.nan, checkpoint_epoch=0)
    report.method = f"task_arithmetic_{setting}"
    report.records = points
    chosen = min(points, key=lambda p: abs(p.alpha - report.alpha))
    report.loss_merged, report.acc_merged = chosen.loss, chosen.accuracy
    report.loss_a, report.acc_a = nets.evaluate(finetuned[0], pooled.inputs, pooled.labels)
    if len(finetuned) > 1:
        report.loss_b, report.acc_b = nets.evaluate(finetuned[1], pooled.inputs, pooled.labels)
        report.gain_mean = analysis.performance_gain(report.acc_merged, (report.acc_a, report.acc_b))
    return report
