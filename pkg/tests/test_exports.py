from __future__ import annotations

import json

import numpy as np
import pytest
from openpyxl import load_workbook

from mergelab.analysis import MergeReport
from utils.artifact_store import ArtifactStore
from utils.charts_helper import make_bar_chart, make_heatmap, make_line_chart, save_drawing
from utils.export_csv import (
    HEADERS,
    PLANE_HEADERS,
    export_merge_events_to_csv,
    format_value,
    merge_event_rows,
    merge_shards,
    read_rows,
    render_csv,
    write_csv,
)
from utils.export_excel import export_tables_to_excel
from utils.pdf_helper import export_report_pdf


def _report(config_id="c001", seed=0, **kw):
    base = dict(eta=0.1, batch_size=64, momentum=0.9, weight_decay=5e-4, seed=seed, acc_merged=0.75, gain_mean=0.01)
    base.update(kw)
    return MergeReport(config_id, 0.15625, 10, **base)


def test_format_value():
    assert format_value(True) == "1"
    assert format_value(3) == "3"
    assert format_value(float("nan")) == "nan"
    assert format_value(float("-inf")) == "-inf"
    assert format_value(0.1 + 0.2) == "0.3"
    assert format_value(np.float32(0.5)) == "0.5"
    assert format_value(None) == ""
    assert format_value("hill") == "hill"
    assert format_value(1 / 3, 4) == "0.3333"


def test_merge_event_header_is_fixed():
    assert HEADERS[0] == "config_id" and HEADERS[-1] == "diverged"
    assert len(HEADERS) == 21
    text = render_csv(HEADERS, merge_event_rows([_report()]))
    header, row = text.splitlines()
    assert header == ",".join(HEADERS)
    fields = row.split(",")
    assert fields[0] == "c001-s0"
    assert fields[HEADERS.index("s_tilde")] == "0.15625"
    assert fields[HEADERS.index("loss_merged")] == "nan"
    assert fields[HEADERS.index("diverged")] == "0"


def test_diverged_rows_are_flagged(tmp_path):
    path = export_merge_events_to_csv([_report(diverged=True)], tmp_path / "merge_events.csv")
    (row,) = read_rows(path)
    assert row["diverged"] == "1"
    assert row["gain_mean"] == "0.01"


def test_render_rejects_ragged_rows():
    with pytest.raises(ValueError):
        render_csv(PLANE_HEADERS, [[0.0, 1.0]])


def test_merge_shards_orders_rows_by_config_id(tmp_path):
    first = write_csv(HEADERS, merge_event_rows([_report("c002")]), tmp_path / "b.csv")
    reports = [_report("c000", 1), _report("c000", 0)]
    reports[0].checkpoint_epoch = 5
    reports[1].checkpoint_epoch = 10
    second = write_csv(HEADERS, merge_event_rows(reports), tmp_path / "a.csv")
    merged = merge_shards([first, second], HEADERS).splitlines()
    assert [line.split(",")[0] for line in merged[1:]] == ["c000-s0", "c000-s1", "c002-s0"]
    with pytest.raises(ValueError):
        merge_shards([first], PLANE_HEADERS)


def test_csv_bytes_are_reproducible(tmp_path):
    rows = merge_event_rows([_report(), _report("c002", 1)])
    a = write_csv(HEADERS, rows, tmp_path / "a.csv").read_bytes()
    b = write_csv(HEADERS, rows, tmp_path / "b.csv").read_bytes()
    assert a == b


def test_store_registers_and_verifies(tmp_path):
    store = ArtifactStore(tmp_path)
    path = write_csv(PLANE_HEADERS, [[0.0, 0.0, 1.0, 0.5]], tmp_path / "plane.csv", store=store)
    store.set_cell_status("c000-s0", "ok")
    store.set_cell_status("c001-s0", "failed", "boom")
    store.save()
    assert store.verify() == []
    path.write_text("x,y,loss,accuracy\n", encoding="utf-8")
    assert store.verify() == ["plane.csv"]

    reopened = ArtifactStore(tmp_path)
    assert reopened.cell_statuses() == {"c000-s0": "ok", "c001-s0": "failed"}
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["cells"]["c001-s0"]["error"] == "boom"
    with pytest.raises(ValueError):
        store.set_cell_status("c000-s0", "lost")


def test_corrupted_manifest_starts_fresh(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json", encoding="utf-8")
    assert ArtifactStore(tmp_path).manifest == {"artifacts": {}, "cells": {}}


def test_excel_export_has_one_sheet_per_table(tmp_path):
    tables = {
        "summary": (["config", "gain"], [["c000", 0.5], ["c001", float("nan")]]),
        "collapse": (["metric", "value"], [["collapse_score", np.float64(0.25)]]),
    }
    path = export_tables_to_excel(tables, tmp_path / "report.xlsx")
    wb = load_workbook(path)
    assert wb.sheetnames == ["summary", "collapse"]
    ws = wb["summary"]
    assert ws["A1"].value == "config" and ws["A1"].font.bold
    assert ws["B3"].value == "nan"
    assert wb["collapse"]["B2"].value == 0.25


def test_pdf_report_is_written(tmp_path):
    sections = {"Summary": (["config", "gain"], [["c000", 0.123456789]])}
    path = export_report_pdf("Merge report", sections, tmp_path / "report.pdf", notes=["smoke"])
    assert path.read_bytes().startswith(b"%PDF")


def test_charts_render_to_pdf_and_svg(tmp_path):
    line = make_line_chart("gain", {"B=16": [(0.1, 0.2), (0.2, float("nan")), (0.3, 0.1)], "empty": []}, "S", "gain")
    assert save_drawing(line, tmp_path / "line.pdf").read_bytes().startswith(b"%PDF")
    assert b"<svg" in save_drawing(line, tmp_path / "line.svg").read_bytes()
    bar = make_bar_chart("eigs", ["A", "B"], [3.0, float("inf")])
    save_drawing(bar, tmp_path / "bar.pdf")
    values = np.array([[1.0, 2.0], [3.0, np.nan]])
    heat = make_heatmap("plane", [0.0, 1.0], [0.0, 1.0], values, {"A": (1.0, 0.0)})
    assert save_drawing(heat, tmp_path / "heat.pdf").stat().st_size > 0
