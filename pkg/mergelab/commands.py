"""The ``cmd_*`` operations behind ``run_lab.py``.

Each command takes an :class:`ExperimentPlan`, writes its artifacts into the
plan's output directory (atomically, listed in ``manifest.json``) and
returns an exit status: 0 clean, 2 partial (some cells diverged or failed),
1 total failure.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from mergelab import analysis, merge, nets, protocol
from mergelab import tensor_core as tc
from mergelab.analysis import CellSummary, MergeReport
from mergelab.data import AugmentSpec, TaskSplits
from mergelab.optim import DivergenceError, gradient_noise_trace
from mergelab.plan import ExperimentPlan, GridCell
from utils import charts_helper, export_csv
from utils.artifact_store import ArtifactStore
from utils.export_excel import export_tables_to_excel
from utils.pdf_helper import export_report_pdf

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64

MERGE_EVENTS = "merge_events.csv"
TRAIN_LOG = "train_log.csv"
NOISE_TRACE = "noise_trace.csv"
TA_EXTRAPOLATION = "ta_extrapolation.csv"
TA_CURVE = "ta_curve.csv"
POLICY_COMPARE = "policy_compare.csv"
HESSIAN = "hessian.csv"
PLANE = "plane.csv"
PLANE_ANCHORS = "plane_anchors.csv"
REPORT_DIR = "report"


def exit_status(statuses: list[str]) -> int:
    if not statuses:
        return EXIT_FAILED
    if all(s == "ok" for s in statuses):
        return EXIT_OK
    if all(s == "failed" for s in statuses):
        return EXIT_FAILED
    return EXIT_PARTIAL


@dataclass
class Context:
    """Data, architecture and output bookkeeping shared by one command."""

    plan: ExperimentPlan
    splits: TaskSplits
    arch: nets.ArchDescriptor
    store: ArtifactStore

    @classmethod
    def open(cls, plan: ExperimentPlan) -> "Context":
        splits = plan.load_data()
        arch = plan.arch(splits.train.sample_shape, splits.train.class_count)
        return cls(plan, splits, arch, ArtifactStore(plan.out_dir))

    @property
    def digits(self) -> int:
        return int(self.plan.get("output", "digits"))

    def write(self, name: str, headers: list[str], rows: list[list[object]]) -> Path:
        return export_csv.write_csv(headers, rows, self.store.root / name, store=self.store, digits=self.digits)

    def default_config(self):
        return self.plan.train_config(len(self.splits.train))


def _train_log_rows(config_id: str, log: list[protocol.EpochLog]) -> list[list[object]]:
    rows: list[list[object]] = []
    for entry in log:
        groups = entry.eta_eff or {"": math.nan}
        for group, value in groups.items():
            rows.append([config_id, entry.epoch, entry.step, entry.lr, entry.loss, group, value])
    return rows


def _noise_rows(
    config_id: str,
    config,
    checkpoints: list[protocol.Checkpoint],
    splits: TaskSplits,
    n_samples: int,
    seed: int,
    jitter_spec: AugmentSpec,
) -> list[list[object]]:
    rows: list[list[object]] = []
    n = min(n_samples, len(splits.train))
    if n < 2:
        return rows
    for ckpt in checkpoints:
        for spec in (AugmentSpec(enabled=False), jitter_spec):
            rng = np.random.default_rng([seed, ckpt.epoch])
            trace = gradient_noise_trace(ckpt.params, splits.train, n, rng, spec)
            rows.append([config_id, config.eta, config.batch_size, config.s_tilde, ckpt.epoch, spec.label(), trace])
    return rows


def _checkpoint_at(checkpoints: list[protocol.Checkpoint], index: int) -> protocol.Checkpoint:
    if not checkpoints:
        raise RuntimeError("No checkpoint available (trunk diverged before the first one)")
    return checkpoints[index]


# ----------------------------------------------------------------------
# train / bifurcate
def cmd_train(plan: ExperimentPlan) -> int:
    """Trunk run for the ``[train]`` config: checkpoints, training log, noise traces."""
    ctx = Context.open(plan)
    config = ctx.default_config()
    cell_id = f"c000-s{plan.seed}"
    trunk = protocol.train_trunk(
        config,
        ctx.splits.train,
        ctx.arch,
        plan.seed,
        checkpoint_every=plan.get("trunk", "checkpoint_every"),
        out_dir=ctx.store.root,
        store=ctx.store,
        checked=plan.checked,
    )
    ctx.write(TRAIN_LOG, export_csv.TRAIN_LOG_HEADERS, _train_log_rows(cell_id, trunk.log))
    rows = _noise_rows(
        cell_id,
        config,
        trunk.checkpoints,
        ctx.splits,
        plan.get("analysis", "noise_samples"),
        plan.seed,
        plan.augment_spec(True),
    )
    ctx.write(NOISE_TRACE, export_csv.NOISE_HEADERS, rows)
    status = "diverged" if trunk.diverged else "ok"
    ctx.store.set_cell_status(cell_id, status, f"step {trunk.diverged_step}" if trunk.diverged else None)
    ctx.store.save()
    logger.info("Trunk finished with %d checkpoints (%s)", len(trunk.checkpoints), status)
    return exit_status([status])


def cmd_bifurcate(plan: ExperimentPlan) -> int:
    """Trunk, branches and merge events for the ``[train]`` config."""
    ctx = Context.open(plan)
    bplan = plan.bifurcation_plan(ctx.default_config())
    result = protocol.run_bifurcation_experiment(
        bplan, ctx.splits, ctx.arch, plan.seed, config_id="c000", out_dir=ctx.store.root, store=ctx.store, checked=plan.checked
    )
    ctx.write(MERGE_EVENTS, export_csv.HEADERS, export_csv.merge_event_rows(result.reports))
    ctx.write(TRAIN_LOG, export_csv.TRAIN_LOG_HEADERS, _train_log_rows(f"c000-s{plan.seed}", result.trunk.log))
    status = "diverged" if any(r.diverged for r in result.reports) else "ok"
    ctx.store.set_cell_status(f"c000-s{plan.seed}", status)
    ctx.store.save()
    return exit_status([status])


# ----------------------------------------------------------------------
# sweep
@dataclass
class SweepJob:
    plan: ExperimentPlan
    cell: GridCell
    seed: int

    @property
    def job_id(self) -> str:
        return f"{self.cell.config_id}-s{self.seed}"


@dataclass
class JobOutcome:
    job_id: str
    status: str
    error: str = ""
    shards: dict[str, Path] = field(default_factory=dict)


def _ta_extrapolation_rows(job_id: str, config, branches: protocol.BranchResult, ckpt: protocol.Checkpoint, splits: TaskSplits, grid) -> list[list[object]]:
    report = protocol.run_task_arithmetic_setting(
        "b", base=ckpt.params, finetuned=[branches.theta_a, branches.theta_b], eval_sets=[splits.test], grid=grid
    )
    return [
        [job_id, config.eta, config.batch_size, config.s_tilde, ckpt.epoch, "b", p.alpha, p.loss, p.accuracy, p.normalized_accuracy]
        for p in report.records
    ]


def run_sweep_job(job: SweepJob) -> JobOutcome:
    """One (grid cell, seed): bifurcation experiment plus per-cell landscape sweeps, written as shards."""
    plan = job.plan
    out = plan.out_dir
    cell_dir = out / job.job_id
    shard_dir = out / "shards"
    digits = int(plan.get("output", "digits"))
    try:
        with tc.precision(plan.precision):
            splits = plan.load_data()
            arch = plan.arch(splits.train.sample_shape, splits.train.class_count)
            bplan = plan.bifurcation_plan(job.cell.config)
            result = protocol.run_bifurcation_experiment(
                bplan,
                splits,
                arch,
                job.seed,
                config_id=job.cell.config_id,
                out_dir=cell_dir,
                checked=plan.checked,
                keep_branches=True,
            )
            shards = {
                MERGE_EVENTS: export_csv.write_csv(
                    export_csv.HEADERS, export_csv.merge_event_rows(result.reports), shard_dir / f"{job.job_id}.events.csv", digits=digits
                ),
                TRAIN_LOG: export_csv.write_csv(
                    export_csv.TRAIN_LOG_HEADERS, _train_log_rows(job.job_id, result.trunk.log), shard_dir / f"{job.job_id}.log.csv", digits=digits
                ),
            }
            last = [c for c in result.trunk.checkpoints if c.epoch in result.branches and not result.branches[c.epoch].diverged]
            noise_rows: list[list[object]] = []
            extrapolation_rows: list[list[object]] = []
            if last:
                ckpt = last[-1]
                noise_rows = _noise_rows(
                    job.job_id, job.cell.config, [ckpt], splits, plan.get("analysis", "noise_samples"), job.seed, plan.augment_spec(True)
                )
                if plan.get("analysis", "task_extrapolation"):
                    grid = plan.alpha_grid(plan.get("task_arithmetic", "extrapolation_max"))
                    extrapolation_rows = _ta_extrapolation_rows(job.job_id, job.cell.config, result.branches[ckpt.epoch], ckpt, splits, grid)
            shards[NOISE_TRACE] = export_csv.write_csv(
                export_csv.NOISE_HEADERS, noise_rows, shard_dir / f"{job.job_id}.noise.csv", digits=digits
            )
            shards[TA_EXTRAPOLATION] = export_csv.write_csv(
                export_csv.SWEEP_HEADERS, extrapolation_rows, shard_dir / f"{job.job_id}.extrapolation.csv", digits=digits
            )
        status = "diverged" if any(r.diverged for r in result.reports) else "ok"
        return JobOutcome(job.job_id, status, shards=shards)
    except Exception as exc:  # noqa: BLE001
        logger.exception("Sweep job %s failed", job.job_id)
        return JobOutcome(job.job_id, "failed", error=str(exc))


def _run_jobs(jobs: list[SweepJob], workers: int, runner: Callable[[SweepJob], JobOutcome]) -> list[JobOutcome]:
    if workers <= 1:
        return [runner(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
        return list(pool.map(runner, jobs))


def cmd_sweep(plan: ExperimentPlan) -> int:
    """Every grid cell and seed; shards merged by sorted config id."""
    ctx = Context.open(plan)
    cells = plan.grid_cells(len(ctx.splits.train))
    jobs = [SweepJob(plan, cell, int(seed)) for cell in cells for seed in plan.get("grid", "seeds")]
    logger.info("Sweep: %d cells x %d seeds on %d worker(s)", len(cells), len(plan.get("grid", "seeds")), plan.workers)
    outcomes = _run_jobs(jobs, plan.workers, run_sweep_job)
    tables = {
        MERGE_EVENTS: export_csv.HEADERS,
        TRAIN_LOG: export_csv.TRAIN_LOG_HEADERS,
        NOISE_TRACE: export_csv.NOISE_HEADERS,
        TA_EXTRAPOLATION: export_csv.SWEEP_HEADERS,
    }
    for name, headers in tables.items():
        shards = [o.shards[name] for o in outcomes if name in o.shards]
        ctx.store.write_text(name, export_csv.merge_shards(shards, headers))
    for outcome in outcomes:
        ctx.store.set_cell_status(outcome.job_id, outcome.status, outcome.error or None)
        for path in outcome.shards.values():
            ctx.store.register(path)
        cell_dir = ctx.store.root / outcome.job_id
        if cell_dir.exists():
            for ckpt in sorted(cell_dir.glob("*.ckpt")):
                ctx.store.register(ckpt)
    ctx.store.save()
    statuses = [o.status for o in outcomes]
    logger.info("Sweep done: %d ok, %d diverged, %d failed", statuses.count("ok"), statuses.count("diverged"), statuses.count("failed"))
    return exit_status(statuses)


# ----------------------------------------------------------------------
# merge / hessian / slice
def cmd_merge(plan: ExperimentPlan) -> int:
    """Statistics-policy comparison and task-arithmetic α-curves (settings a and b)."""
    ctx = Context.open(plan)
    setting = plan.get("task_arithmetic", "setting")
    curve_rows: list[list[object]] = []
    statuses: list[str] = []
    if setting in ("b", "both"):
        config = ctx.default_config()
        bplan = plan.bifurcation_plan(config)
        trunk = protocol.train_trunk(
            config, ctx.splits.train, ctx.arch, plan.seed, checkpoint_every=plan.get("trunk", "checkpoint_every"), checked=plan.checked
        )
        ckpt = _checkpoint_at(trunk.checkpoints, plan.get("slice", "checkpoint"))
        branches = protocol.bifurcate(ckpt, bplan, ctx.splits.train, checked=plan.checked)
        if branches.diverged:
            statuses.append("diverged")
        else:
            policy_rows = []
            for policy in ("interpolate", "recompute"):
                merged = merge.linear_interpolate(
                    branches.theta_a,
                    branches.theta_b,
                    bplan.alpha,
                    policy=policy,
                    dataset=ctx.splits.train,
                    n_batches=plan.get("merge", "recompute_batches"),
                )
                test = ctx.splits.test
                loss_m, acc_m = nets.evaluate(merged, test.inputs, test.labels)
                acc_a = nets.evaluate(branches.theta_a, test.inputs, test.labels)[1]
                acc_b = nets.evaluate(branches.theta_b, test.inputs, test.labels)[1]
                gain = analysis.performance_gain(acc_m, (acc_a, acc_b))
                policy_rows.append([f"c000-s{plan.seed}", ckpt.epoch, policy, loss_m, acc_m, acc_a, acc_b, gain])
                logger.info("Policy %s: merged acc %.4f (gain %.4f)", policy, acc_m, gain)
            ctx.write(POLICY_COMPARE, export_csv.POLICY_HEADERS, policy_rows)
            curve_rows += _ta_extrapolation_rows(
                f"c000-s{plan.seed}", config, branches, ckpt, ctx.splits, plan.alpha_grid(plan.get("task_arithmetic", "extrapolation_max"))
            )
            statuses.append("diverged" if trunk.diverged else "ok")
    if setting in ("a", "both"):
        tasks = [plan.load_data(task_id=t) for t in range(plan.get("task_arithmetic", "tasks"))]
        config = plan.train_config(len(tasks[0].train) * len(tasks), epochs=plan.get("task_arithmetic", "pretrain_epochs"))
        try:
            base, finetuned = protocol.pretrain_and_finetune(
                tasks,
                ctx.arch,
                config,
                plan.seed,
                finetune_epochs=plan.get("task_arithmetic", "finetune_epochs"),
                decay_shape=plan.get("branch", "decay_shape"),
            )
        except DivergenceError as exc:
            logger.warning("Setting a skipped: %s", exc)
            statuses.append("diverged")
        else:
            report = protocol.run_task_arithmetic_setting(
                "a",
                base=base,
                finetuned=finetuned,
                eval_sets=[t.test for t in tasks],
                grid=plan.alpha_grid(plan.get("task_arithmetic", "grid_max")),
            )
            curve_rows += [
                [f"ta-s{plan.seed}", config.eta, config.batch_size, config.s_tilde, 0, "a", p.alpha, p.loss, p.accuracy, p.normalized_accuracy]
                for p in report.records
            ]
            statuses.append("ok")
    ctx.write(TA_CURVE, export_csv.SWEEP_HEADERS, curve_rows)
    for i, status in enumerate(statuses):
        ctx.store.set_cell_status(f"merge-{i}", status)
    ctx.store.save()
    return exit_status(statuses)


def cmd_hessian(plan: ExperimentPlan) -> int:
    """Top Hessian eigenvalues of branch endpoints and merges for every grid learning rate."""
    ctx = Context.open(plan)
    a = plan.values["analysis"]
    rows: list[list[object]] = []
    statuses: list[str] = []
    epochs = plan.get("trunk", "epochs")
    for idx, eta in enumerate(plan.get("grid", "eta")):
        config_id = f"h{idx:03d}-s{plan.seed}"
        config = plan.train_config(len(ctx.splits.train), eta=eta)
        bplan = plan.bifurcation_plan(config)
        trunk = protocol.train_trunk(config, ctx.splits.train, ctx.arch, plan.seed, checkpoint_every=epochs, checked=plan.checked)
        if not trunk.checkpoints:
            statuses.append("diverged")
            continue
        ckpt = trunk.checkpoints[-1]
        branches = protocol.bifurcate(ckpt, bplan, ctx.splits.train, checked=plan.checked)
        if branches.diverged:
            statuses.append("diverged")
            continue
        merged = merge.linear_interpolate(branches.theta_a, branches.theta_b, bplan.alpha)
        for name, model in (("A", branches.theta_a), ("B", branches.theta_b), ("merged", merged)):
            eigs = analysis.network_hessian_eigs(
                model,
                ctx.splits.train,
                k=a["hessian_k"],
                sample_size=a["hessian_samples"],
                tol=a["hessian_tol"],
                max_iters=a["hessian_iters"],
                seed=plan.seed,
                mode=a["hessian_mode"],
            )
            for rank, (value, ok) in enumerate(zip(eigs.values, eigs.converged), start=1):
                rows.append([config_id, eta, config.batch_size, config.s_tilde, name, rank, value, ok])
            logger.info("Hessian eta=%g %s: top eigenvalue %.4g", eta, name, eigs.values[0])
        statuses.append("ok")
    ctx.write(HESSIAN, export_csv.HESSIAN_HEADERS, rows)
    for i, status in enumerate(statuses):
        ctx.store.set_cell_status(f"h{i:03d}", status)
    ctx.store.save()
    return exit_status(statuses)


def cmd_slice(plan: ExperimentPlan) -> int:
    """Loss plane through a trunk checkpoint and its two branch endpoints."""
    ctx = Context.open(plan)
    config = ctx.default_config()
    bplan = plan.bifurcation_plan(config)
    trunk = protocol.train_trunk(
        config, ctx.splits.train, ctx.arch, plan.seed, checkpoint_every=plan.get("trunk", "checkpoint_every"), checked=plan.checked
    )
    ckpt = _checkpoint_at(trunk.checkpoints, plan.get("slice", "checkpoint"))
    branches = protocol.bifurcate(ckpt, bplan, ctx.splits.train, checked=plan.checked)
    if branches.diverged:
        ctx.store.set_cell_status("slice", "diverged")
        ctx.store.save()
        return EXIT_FAILED
    plane = analysis.loss_plane(
        ckpt.params,
        branches.theta_a,
        branches.theta_b,
        ctx.splits.train,
        resolution=plan.get("slice", "resolution"),
        margin=plan.get("slice", "margin"),
    )
    rows = [
        [float(x), float(y), float(plane.losses[j, i]), float(plane.accuracies[j, i])]
        for j, y in enumerate(plane.ys)
        for i, x in enumerate(plane.xs)
    ]
    ctx.write(PLANE, export_csv.PLANE_HEADERS, rows)
    anchor_rows = []
    for name, model in (("base", ckpt.params), ("A", branches.theta_a), ("B", branches.theta_b)):
        loss, acc = nets.evaluate(model, ctx.splits.train.inputs, ctx.splits.train.labels)
        x, y = plane.anchors[name]
        anchor_rows.append([name, x, y, loss, acc])
    ctx.write(PLANE_ANCHORS, export_csv.ANCHOR_HEADERS, anchor_rows)
    ctx.store.set_cell_status("slice", "ok")
    ctx.store.save()
    return EXIT_OK


# ----------------------------------------------------------------------
# report
CONFIG_COLUMNS = ["config", "eta", "batch_size", "momentum", "weight_decay", "augment", "s_tilde"]


def _events_frame(source) -> pd.DataFrame:
    frame = pd.read_csv(source, keep_default_na=False, na_values=["nan"])
    split = frame["config_id"].astype(str).str.rsplit("-s", n=1, expand=True)
    frame["config"] = split[0]
    frame["seed"] = pd.to_numeric(split[1], errors="coerce").fillna(0).astype(int) if split.shape[1] > 1 else 0
    frame["diverged"] = frame["diverged"].astype(int).astype(bool)
    return frame


def load_merge_events(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(path)
    return _events_frame(path)


def summarize_by_config(frame: pd.DataFrame) -> pd.DataFrame:
    ok = frame[~frame["diverged"]]
    grouped = frame.groupby(CONFIG_COLUMNS, sort=True)
    summary = grouped.agg(n_events=("gain_mean", "size"), n_diverged=("diverged", "sum")).reset_index()
    stats = (
        ok.groupby(CONFIG_COLUMNS, sort=True)
        .agg(
            median_gain=("gain_mean", "median"),
            mean_gain=("gain_mean", "mean"),
            median_barrier=("barrier", "median"),
            mean_acc_merged=("acc_merged", "mean"),
        )
        .reset_index()
    )
    summary = summary.merge(stats, on=CONFIG_COLUMNS, how="left")
    return summary.sort_values("config").reset_index(drop=True)


def transition_table(frame: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for config_id, group in frame[~frame["diverged"]].groupby("config_id", sort=True):
        group = group.sort_values("checkpoint_epoch")
        kinds = [k for k in group["transition"].astype(str) if k in analysis.TRANSITION_KINDS]
        if not kinds:
            continue
        epochs = group["checkpoint_epoch"].astype(int).tolist()
        smoothed, changes = analysis.transition_sequence(kinds)
        epoch = analysis.transition_epoch(epochs, kinds)
        rows.append(
            {
                "config_id": config_id,
                "s_tilde": float(group["s_tilde"].iloc[0]),
                "classes": ">".join(kinds),
                "smoothed": ">".join(smoothed),
                "changes": changes,
                "transition_epoch": epoch if epoch is not None else "",
            }
        )
    return pd.DataFrame(rows, columns=["config_id", "s_tilde", "classes", "smoothed", "changes", "transition_epoch"])


def collapse_table(frame: pd.DataFrame, bins: int) -> pd.DataFrame:
    cells = []
    for (config, seed), group in frame.groupby(["config", "seed"], sort=True):
        ok = group[~group["diverged"]]["gain_mean"].dropna()
        cells.append(
            CellSummary(
                config_id=str(config),
                seed=int(seed),
                eta=float(group["eta"].iloc[0]),
                batch_size=int(group["batch_size"].iloc[0]),
                s_tilde=float(group["s_tilde"].iloc[0]),
                median_gain=float(ok.median()) if len(ok) else math.nan,
                diverged=bool(group["diverged"].any()),
            )
        )
    rows = []
    try:
        score = analysis.collapse_score_from_cells(cells, bins)
        rows.append(["collapse_score", score, "binned variance under s_tilde / under eta (lab construction)"])
    except ValueError as exc:
        rows.append(["collapse_score", math.nan, str(exc)])
    usable = [c for c in cells if not c.diverged and math.isfinite(c.median_gain)]
    if usable:
        peak = analysis.interior_peak([c.s_tilde for c in usable], [c.median_gain for c in usable], [c.seed for c in usable], bins)
        center = peak.bin_centers[peak.peak_bin] if peak.found else math.nan
        rows.append(["interior_peak", float(peak.found), f"peak bin s_tilde {center:.3g}" if peak.found else "no interior bin beats both ends"])
        try:
            r = analysis.pearson([math.log10(c.s_tilde) for c in usable], [c.median_gain for c in usable])
            rows.append(["pearson_log_s_tilde_gain", r, "cells without divergence"])
        except ValueError as exc:
            rows.append(["pearson_log_s_tilde_gain", math.nan, str(exc)])
    return pd.DataFrame(rows, columns=["metric", "value", "note"])


def axis_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Median gain per weight-decay value and per augmentation setting, across the other axes."""
    rows = []
    for axis in ("weight_decay", "augment"):
        for value, group in summary.groupby(axis, sort=True):
            gains = group["median_gain"].dropna()
            rows.append([axis, str(value), float(gains.median()) if len(gains) else math.nan, len(group)])
    return pd.DataFrame(rows, columns=["axis", "value", "median_gain", "n_configs"])


def sharpness_table(path: Path) -> Optional[pd.DataFrame]:
    if not path.exists():
        return None
    curve = pd.read_csv(path, keep_default_na=False, na_values=["nan"])
    if curve.empty:
        return None
    rows = []
    for config_id, group in curve.groupby("config_id", sort=True):
        points = [analysis.SweepPoint(float(a), float(l), float(c)) for a, l, c in zip(group["alpha"], group["loss"], group["accuracy"])]
        try:
            drop = analysis.extrapolation_drop(points)
        except ValueError:
            continue
        rows.append([config_id, float(group["eta"].iloc[0]), int(group["batch_size"].iloc[0]), float(group["s_tilde"].iloc[0]), drop])
    return pd.DataFrame(rows, columns=["config_id", "eta", "batch_size", "s_tilde", "extrapolation_drop"])


def _table(frame: pd.DataFrame) -> tuple[list[str], list[list[object]]]:
    return list(frame.columns), frame.astype(object).values.tolist()


def _gain_series(summary: pd.DataFrame, x_column: str) -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    for batch, group in summary.groupby("batch_size", sort=True):
        series[f"B={batch}"] = [
            (math.log10(float(x)), float(y)) for x, y in zip(group[x_column], group["median_gain"]) if float(x) > 0
        ]
    return series


def cmd_report(plan: ExperimentPlan) -> int:
    """Summary tables, workbook, PDF and charts from the emitted CSVs only."""
    out = plan.out_dir
    frame = load_merge_events(out / MERGE_EVENTS)
    store = ArtifactStore(out / REPORT_DIR)
    digits = int(plan.get("output", "digits"))
    summary = summarize_by_config(frame)
    transitions = transition_table(frame)
    collapse = collapse_table(frame, plan.get("analysis", "collapse_bins"))
    tables = {
        "summary_by_config": summary,
        "transition_phase": transitions,
        "collapse": collapse,
        "gain_by_axis": axis_table(summary),
    }
    sharp = sharpness_table(out / TA_EXTRAPOLATION)
    if sharp is not None:
        tables["ta_sharpness"] = sharp
    for name, table in tables.items():
        headers, rows = _table(table)
        export_csv.write_csv(headers, rows, store.root / f"{name}.csv", store=store, digits=digits)
    sections = {name: _table(table) for name, table in tables.items()}
    store.register(export_tables_to_excel(sections, store.root / "report.xlsx"))
    store.register(
        export_report_pdf(
            "Merge gain under optimizer noise",
            sections,
            store.root / "report.pdf",
            notes=["The collapse score is this lab's own alignment measure."],
        )
    )
    if plan.charts and not summary.empty:
        chart = charts_helper.make_line_chart(
            "Median merge gain vs effective noise", _gain_series(summary, "s_tilde"), "log10 S~", "gain"
        )
        for suffix in (".pdf", ".svg"):
            store.register(charts_helper.save_drawing(chart, store.root / f"gain_vs_noise{suffix}"))
        chart = charts_helper.make_line_chart("Median merge gain vs learning rate", _gain_series(summary, "eta"), "log10 eta", "gain")
        store.register(charts_helper.save_drawing(chart, store.root / "gain_vs_lr.pdf"))
        axes = tables["gain_by_axis"]
        for axis in ("weight_decay", "augment"):
            rows = axes[axes["axis"] == axis]
            if len(rows) > 1:
                chart = charts_helper.make_bar_chart(f"Median merge gain by {axis}", rows["value"].tolist(), rows["median_gain"].tolist())
                store.register(charts_helper.save_drawing(chart, store.root / f"gain_by_{axis}.pdf"))
        plane_path = out / PLANE
        if plane_path.exists():
            plane = pd.read_csv(plane_path)
            xs = np.sort(plane["x"].unique())
            ys = np.sort(plane["y"].unique())
            grid = plane.pivot_table(index="y", columns="x", values="loss").reindex(index=ys, columns=xs).to_numpy()
            anchors_path = out / PLANE_ANCHORS
            anchors = None
            if anchors_path.exists():
                anchor_frame = pd.read_csv(anchors_path)
                anchors = {str(m): (float(x), float(y)) for m, x, y in zip(anchor_frame["model"], anchor_frame["x"], anchor_frame["y"])}
            store.register(charts_helper.save_drawing(charts_helper.make_heatmap("Training loss plane", xs, ys, grid, anchors), store.root / "loss_plane.pdf"))
        hessian_path = out / HESSIAN
        if hessian_path.exists():
            hess = pd.read_csv(hessian_path)
            top = hess[(hess["rank"] == 1) & (hess["model"] == "A")]
            if not top.empty:
                chart = charts_helper.make_bar_chart(
                    "Top Hessian eigenvalue by learning rate", [f"{e:g}" for e in top["eta"]], top["eigenvalue"].tolist()
                )
                store.register(charts_helper.save_drawing(chart, store.root / "hessian_top.pdf"))
    store.save()
    logger.info("Report written to %s", store.root)
    return EXIT_OK


COMMANDS: dict[str, Callable[[ExperimentPlan], int]] = {
    "train": cmd_train,
    "bifurcate": cmd_bifurcate,
    "sweep": cmd_sweep,
    "merge": cmd_merge,
    "hessian": cmd_hessian,
    "slice": cmd_slice,
    "report": cmd_report,
}


def run_command(name: str, plan: ExperimentPlan) -> int:
    if name not in COMMANDS:
        raise ValueError(f"Unknown command {name!r}")
    with tc.precision(plan.precision):
        return COMMANDS[name](plan)


def reports_frame(reports: list[MergeReport]) -> pd.DataFrame:
    """Merge reports as the frame ``load_merge_events`` would read back."""
    text = export_csv.render_csv(export_csv.HEADERS, export_csv.merge_event_rows(reports))
    return _events_frame(StringIO(text))
