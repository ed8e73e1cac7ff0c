from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from mergelab import commands
from mergelab.analysis import MergeReport
from mergelab.commands import EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, exit_status, run_command
from mergelab.plan import load_plan
from utils.artifact_store import ArtifactStore
from utils.export_csv import HEADERS, read_rows

TINY_PLAN = (Path(__file__).parent / "fixtures" / "tiny.plan").read_text(encoding="utf-8")

SWEEP_TABLES = (commands.MERGE_EVENTS, commands.TRAIN_LOG, commands.NOISE_TRACE, commands.TA_EXTRAPOLATION)
REPORT_TABLES = ("summary_by_config.csv", "transition_phase.csv", "collapse.csv", "ta_sharpness.csv")


def _plan(out, text=TINY_PLAN, **overrides):
    return load_plan(text=text).with_overrides(dir=str(out), **overrides)


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    status = run_command("sweep", _plan(out))
    return out, status


@pytest.mark.parametrize(
    "statuses, code",
    [([], EXIT_FAILED), (["ok", "ok"], EXIT_OK), (["failed"], EXIT_FAILED), (["ok", "diverged"], EXIT_PARTIAL), (["ok", "failed"], EXIT_PARTIAL)],
)
def test_exit_status(statuses, code):
    assert exit_status(statuses) == code


def test_sweep_writes_merged_tables(swept):
    out, status = swept
    assert status == EXIT_OK
    for name in SWEEP_TABLES:
        assert (out / name).exists()
    events = read_rows(out / commands.MERGE_EVENTS)
    # 4 cells x 1 seed x 2 checkpoints
    assert len(events) == 8
    assert list(events[0]) == HEADERS
    ids = [row["config_id"] for row in events]
    assert ids == sorted(ids)
    assert set(ids) == {"c000-s0", "c001-s0", "c002-s0", "c003-s0"}
    store = ArtifactStore(out)
    assert set(store.cell_statuses().values()) == {"ok"}
    assert store.verify() == []
    assert (out / "c000-s0" / "trunk_e0001.ckpt").exists()


def test_sweep_is_byte_reproducible(swept, tmp_path):
    out, _ = swept
    assert run_command("sweep", _plan(tmp_path / "again")) == EXIT_OK
    for name in SWEEP_TABLES:
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()


def test_parallel_sweep_matches_serial(swept, tmp_path):
    out, _ = swept
    assert run_command("sweep", _plan(tmp_path / "parallel", workers=2)) == EXIT_OK
    for name in SWEEP_TABLES:
        assert (tmp_path / "parallel" / name).read_bytes() == (out / name).read_bytes()


def test_report_reads_only_the_tables(swept, tmp_path):
    out, _ = swept
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert run_command("report", _plan(copy)) == EXIT_OK
    first = {name: (copy / "report" / name).read_bytes() for name in REPORT_TABLES}
    for ckpt in copy.rglob("*.ckpt"):
        ckpt.unlink()
    shutil.rmtree(copy / "report")
    assert run_command("report", _plan(copy, charts=False)) == EXIT_OK
    for name in REPORT_TABLES:
        assert (copy / "report" / name).read_bytes() == first[name]
    assert (copy / "report" / "report.xlsx").exists()
    assert (copy / "report" / "report.pdf").exists()


def test_report_renders_charts(swept, tmp_path):
    out, _ = swept
    copy = tmp_path / "charts"
    shutil.copytree(out, copy)
    run_command("report", _plan(copy))
    for name in ("gain_vs_noise.pdf", "gain_vs_noise.svg", "gain_vs_lr.pdf"):
        assert (copy / "report" / name).stat().st_size > 0
    collapse = {row["metric"]: row for row in read_rows(copy / "report" / "collapse.csv")}
    assert set(collapse) >= {"collapse_score"}


def test_report_without_merge_events_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_command("report", _plan(tmp_path))


def test_diverging_cell_gives_partial_status(tmp_path):
    text = TINY_PLAN.replace("eta = 0.05, 0.1", "eta = 0.05, 1e38").replace("batch_size = 16, 32", "batch_size = 16")
    text = text.replace("[analysis]", "[analysis]\ntask_extrapolation = off")
    assert run_command("sweep", _plan(tmp_path, text)) == EXIT_PARTIAL
    statuses = ArtifactStore(tmp_path).cell_statuses()
    assert statuses == {"c000-s0": "ok", "c001-s0": "diverged"}
    flagged = [row for row in read_rows(tmp_path / commands.MERGE_EVENTS) if row["config_id"] == "c001-s0"]
    assert flagged and all(row["diverged"] == "1" for row in flagged)


def test_train_command(tmp_path):
    assert run_command("train", _plan(tmp_path)) == EXIT_OK
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["trunk_e0001.ckpt", "trunk_e0002.ckpt"]
    log = read_rows(tmp_path / commands.TRAIN_LOG)
    assert {row["group"] for row in log} == {"block0.weight"}
    assert {row["config_id"] for row in log} == {"c000-s0"}
    noise = read_rows(tmp_path / commands.NOISE_TRACE)
    assert [row["augment"] for row in noise] == ["off", "on", "off", "on"]
    assert {row["config_id"] for row in noise} == {"c000-s0"}
    assert ArtifactStore(tmp_path).cell_statuses() == {"c000-s0": "ok"}


def test_bifurcate_command(tmp_path):
    assert run_command("bifurcate", _plan(tmp_path)) == EXIT_OK
    events = read_rows(tmp_path / commands.MERGE_EVENTS)
    assert [row["checkpoint_epoch"] for row in events] == ["1", "2"]
    assert all(row["transition"] in ("hill", "flat", "valley") for row in events)
    assert (tmp_path / "branch_A_e0001.ckpt").exists()


def test_merge_command(tmp_path):
    assert run_command("merge", _plan(tmp_path)) == EXIT_OK
    policies = read_rows(tmp_path / commands.POLICY_COMPARE)
    assert [row["policy"] for row in policies] == ["interpolate", "recompute"]
    curve = read_rows(tmp_path / commands.TA_CURVE)
    settings = [row["setting"] for row in curve]
    assert settings.count("b") == 16 and settings.count("a") == 11


def test_hessian_command(tmp_path):
    assert run_command("hessian", _plan(tmp_path)) == EXIT_OK
    rows = read_rows(tmp_path / commands.HESSIAN)
    # 2 learning rates x 3 models x k = 2
    assert len(rows) == 12
    assert {row["model"] for row in rows} == {"A", "B", "merged"}


def test_slice_command(tmp_path):
    assert run_command("slice", _plan(tmp_path)) == EXIT_OK
    assert len(read_rows(tmp_path / commands.PLANE)) == 9
    anchors = read_rows(tmp_path / commands.PLANE_ANCHORS)
    assert [row["model"] for row in anchors] == ["base", "A", "B"]
    assert float(anchors[0]["x"]) == 0.0 and float(anchors[0]["y"]) == 0.0


def test_reports_frame_matches_loaded_events(tmp_path):
    reports = [MergeReport("c004", 0.2, 5, eta=0.1, batch_size=16, momentum=0.9, weight_decay=0.0, seed=2, gain_mean=0.1)]
    frame = commands.reports_frame(reports)
    assert frame["config"].tolist() == ["c004"]
    assert frame["seed"].tolist() == [2]
    assert not frame["diverged"].any()


def test_unknown_command_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        run_command("deploy", _plan(tmp_path))


def test_axis_table_groups_by_regularizer():
    reports = [
        MergeReport("c000", 0.1, 5, eta=0.1, batch_size=64, momentum=0.9, weight_decay=0.0, seed=0, gain_mean=0.1),
        MergeReport("c001", 0.1, 5, eta=0.1, batch_size=64, momentum=0.9, weight_decay=1e-3, seed=0, gain_mean=0.3),
        MergeReport("c002", 0.1, 5, eta=0.1, batch_size=64, momentum=0.9, weight_decay=1e-3, augment="on", seed=0, gain_mean=0.5),
    ]
    table = commands.axis_table(commands.summarize_by_config(commands.reports_frame(reports)))
    decay = table[table["axis"] == "weight_decay"]
    assert decay["value"].tolist() == ["0.0", "0.001"]
    assert decay["median_gain"].tolist() == pytest.approx([0.1, 0.4])
    aug = table[table["axis"] == "augment"].set_index("value")
    assert aug.loc["on", "n_configs"] == 1
    assert aug.loc["off", "median_gain"] == pytest.approx(0.2)
