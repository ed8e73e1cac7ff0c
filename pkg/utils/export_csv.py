"""CSV export helpers for merge events and the auxiliary experiment tables."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

from utils.artifact_store import ArtifactStore, atomic_write_text

DIGITS = 9

HEADERS = [
    "config_id",
    "eta",
    "batch_size",
    "momentum",
    "weight_decay",
    "augment",
    "s_tilde",
    "checkpoint_epoch",
    "alpha",
    "loss_merged",
    "acc_merged",
    "loss_a",
    "acc_a",
    "loss_b",
    "acc_b",
    "gain_mean",
    "gain_a",
    "gain_b",
    "barrier",
    "transition",
    "diverged",
]

# Rows of a sweep carry the seed in the config id ("c003-s1") so the fixed
# schema above stays unchanged.
TRAIN_LOG_HEADERS = ["config_id", "epoch", "step", "lr", "loss", "group", "eta_eff"]
NOISE_HEADERS = ["config_id", "eta", "batch_size", "s_tilde", "checkpoint_epoch", "augment", "trace"]
HESSIAN_HEADERS = ["config_id", "eta", "batch_size", "s_tilde", "model", "rank", "eigenvalue", "converged"]
PLANE_HEADERS = ["x", "y", "loss", "accuracy"]
ANCHOR_HEADERS = ["model", "x", "y", "loss", "accuracy"]
SWEEP_HEADERS = ["config_id", "eta", "batch_size", "s_tilde", "checkpoint_epoch", "setting", "alpha", "loss", "accuracy", "normalized_accuracy"]
POLICY_HEADERS = ["config_id", "checkpoint_epoch", "policy", "loss_merged", "acc_merged", "acc_a", "acc_b", "gain_mean"]


def format_value(value: object, digits: int = DIGITS) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, f".{digits}g")
    if value is None:
        return ""
    try:
        return format(float(value), f".{digits}g")  # numpy scalars
    except (TypeError, ValueError):
        return str(value)


def _row_from_report(report, config_id: Optional[str] = None) -> list[object]:
    return [
        config_id or report.config_id,
        report.eta,
        report.batch_size,
        report.momentum,
        report.weight_decay,
        report.augment,
        report.s_tilde,
        report.checkpoint_epoch,
        report.alpha,
        report.loss_merged,
        report.acc_merged,
        report.loss_a,
        report.acc_a,
        report.loss_b,
        report.acc_b,
        report.gain_mean,
        report.gain_a,
        report.gain_b,
        report.barrier,
        report.transition,
        report.diverged,
    ]


def merge_event_rows(reports: Iterable, *, with_seed: bool = True) -> list[list[object]]:
    rows = []
    for report in reports:
        config_id = f"{report.config_id}-s{report.seed}" if with_seed else report.config_id
        rows.append(_row_from_report(report, config_id))
    return rows


def render_csv(headers: Sequence[str], rows: Iterable[Sequence[object]], digits: int = DIGITS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    for row in rows:
        if len(row) != len(headers):
            raise ValueError(f"Row of {len(row)} fields for {len(headers)} headers")
        writer.writerow([format_value(v, digits) for v in row])
    return buf.getvalue()


def write_csv(
    headers: Sequence[str],
    rows: Iterable[Sequence[object]],
    filepath: Path | str,
    *,
    store: Optional[ArtifactStore] = None,
    digits: int = DIGITS,
) -> Path:
    text = render_csv(headers, rows, digits)
    if store is not None:
        rel = Path(filepath).resolve().relative_to(store.root.resolve()).as_posix()
        return store.write_text(rel, text)
    return atomic_write_text(filepath, text)


def export_merge_events_to_csv(reports: Iterable, filepath: Path | str, *, store: Optional[ArtifactStore] = None) -> Path:
    return write_csv(HEADERS, merge_event_rows(reports), filepath, store=store)


def read_rows(filepath: Path | str) -> list[dict[str, str]]:
    with open(filepath, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def merge_shards(shards: Iterable[Path | str], headers: Sequence[str]) -> str:
    """Concatenate shard CSVs (same header) ordered by config id, stable within a shard."""
    rows: list[list[str]] = []
    for shard in shards:
        with open(shard, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            head = next(reader, None)
            if head != list(headers):
                raise ValueError(f"Shard {shard} has unexpected header {head}")
            rows.extend(reader)
    rows.sort(key=lambda r: r[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()
