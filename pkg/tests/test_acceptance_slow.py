"""Desk-scale statistical checks. Each needs the full sweep (tens of minutes); run with --runslow."""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import pytest

from mergelab import analysis, commands
from mergelab.commands import EXIT_FAILED
from mergelab.plan import load_plan

pytestmark = pytest.mark.slow

DESK_PLAN = Path(__file__).resolve().parent.parent / "data" / "plans" / "desk_sweep.plan"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    plan = load_plan(DESK_PLAN).with_overrides(dir=str(out), workers=max(1, (os.cpu_count() or 1) - 1), charts=False)
    assert commands.run_command("sweep", plan) != EXIT_FAILED
    return out, commands.load_merge_events(out / commands.MERGE_EVENTS)


@pytest.mark.parametrize("dim, k", [(10, 3), (30, 8), (50, 8)])
def test_hessian_eigs_on_quadratics(dim, k):
    rng = np.random.default_rng(dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    spectrum = 50.0 * 0.8 ** np.arange(dim)
    h = (q * spectrum) @ q.T
    result = analysis.hessian_top_eigs(lambda v: h @ v, dim, k=k, tol=1e-10, max_iters=2000, seed=0)
    np.testing.assert_allclose(result.values, spectrum[:k], rtol=1e-3)


def test_interior_noise_peak_and_collapse(desk):
    _, frame = desk
    table = commands.collapse_table(frame, analysis.COLLAPSE_BINS).set_index("metric")
    assert table.loc["interior_peak", "value"] == 1.0
    score = table.loc["collapse_score", "value"]
    assert math.isfinite(score) and score < 1.0


def test_desk_trunk_goes_from_hill_to_valley(desk):
    _, frame = desk
    # c009 is the (B = 64, eta = 0.1) cell of the desk grid
    for seed in (0, 1, 2):
        group = frame[(frame["config"] == "c009") & (frame["seed"] == seed)].sort_values("checkpoint_epoch")
        kinds = [k for k in group["transition"].astype(str) if k in analysis.TRANSITION_KINDS]
        smoothed, changes = analysis.transition_sequence(kinds)
        assert smoothed[0] == "hill"
        assert smoothed[-1] in ("valley", "flat")
        assert changes <= 1


def test_extrapolation_drop_grows_with_learning_rate(desk):
    out, frame = desk
    sharp = commands.sharpness_table(out / commands.TA_EXTRAPOLATION)
    assert sharp is not None
    stable = set(frame[~frame["diverged"]]["config_id"])
    sharp = sharp[(sharp["batch_size"] == 64) & sharp["config_id"].isin(stable)]
    etas = sorted(sharp["eta"].unique())
    by_eta = sharp.groupby("eta")["extrapolation_drop"].mean()
    assert by_eta[etas[-1]] > by_eta[etas[0]]
