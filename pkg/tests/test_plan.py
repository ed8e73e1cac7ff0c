from __future__ import annotations

from pathlib import Path

import pytest

from mergelab.plan import DEFAULTS, PlanError, load_plan

SMALL = """
[data]
n_train = 256
dim = 8
classes = 4

[arch]
widths = 8, 32, 4   # hidden width 32

[grid]
eta = 0.01, 0.1
batch_size = 16, 64
weight_decay = 0.001
seeds = 0

[output]
charts = off
"""


def test_empty_plan_uses_defaults():
    plan = load_plan(text="")
    assert plan.get("trunk", "epochs") == DEFAULTS["trunk"]["epochs"]
    assert plan.get("grid", "batch_size") == (16, 64, 256)
    assert plan.get("grid", "weight_decay") == (0.0, 1e-4, 1e-3, 1e-2)
    assert plan.precision == 32
    assert plan.charts is True
    assert plan.out_dir == Path("runs/desk")


def test_values_are_parsed_by_their_default_type():
    plan = load_plan(text=SMALL)
    assert plan.get("data", "n_train") == 256
    assert plan.get("arch", "widths") == (8, 32, 4)
    assert plan.get("grid", "eta") == (0.01, 0.1)
    assert plan.get("grid", "seeds") == (0,)
    assert plan.charts is False


def test_bundled_plans_load():
    root = Path(__file__).resolve().parent.parent / "data" / "plans"
    for path in sorted(root.glob("*.plan")):
        plan = load_plan(path)
        assert plan.source == path


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\nx = 1\n",
        "[train]\nlearning_rate = 0.1\n",
        "[train]\nmomentum = 1.0\n",
        "[grid]\neta = 0.1, -0.1\n",
        "[train]\nbatch_size = many\n",
        "[output]\ncharts = maybe\n",
        "[output]\nprecision = 16\n",
        "[branch]\nbudget = total\n",
        "[data]\nn_train = 32\n",
        "[arch]\nkind = transformer\n",
        "no section header",
    ],
)
def test_invalid_plans_are_rejected(text):
    with pytest.raises(PlanError):
        load_plan(text=text)


def test_missing_plan_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_plan(tmp_path / "absent.plan")


def test_base_values_sit_between_defaults_and_file():
    base = {"output": {"workers": 3, "seed": 7}}
    plan = load_plan(text="[output]\nseed = 11\n", base=base)
    assert plan.workers == 3
    assert plan.seed == 11
    with pytest.raises(PlanError):
        load_plan(text="", base={"output": {"colour": "red"}})


def test_overrides_copy_and_validate():
    plan = load_plan(text=SMALL)
    other = plan.with_overrides(seed=5, workers=None, precision=64)
    assert other.seed == 5 and other.precision == 64
    assert plan.seed == 0 and plan.precision == 32
    with pytest.raises(PlanError):
        plan.with_overrides(workers=0)


def test_grid_cells_follow_plan_order():
    plan = load_plan(text=SMALL)
    cells = plan.grid_cells(256)
    assert [c.config_id for c in cells] == ["c000", "c001", "c002", "c003"]
    assert [(c.config.batch_size, c.config.eta) for c in cells] == [(16, 0.01), (16, 0.1), (64, 0.01), (64, 0.1)]
    assert cells[0].config.schedule.warmup_steps == 256 // 16


def test_arch_and_data_follow_the_plan():
    plan = load_plan(text=SMALL)
    splits = plan.load_data()
    arch = plan.arch(splits.train.sample_shape, splits.train.class_count)
    assert arch.widths == (8, 32, 4)
    assert arch.has_norm
    with pytest.raises(PlanError):
        plan.arch((1, 4, 4), 4)


def test_image_data_needs_a_path():
    plan = load_plan(text="[data]\nkind = image\n")
    with pytest.raises(PlanError):
        plan.load_data()


def test_alpha_grid():
    plan = load_plan(text="")
    assert plan.alpha_grid(1.0) == tuple(round(0.1 * i, 10) for i in range(11))
    assert plan.alpha_grid(1.5)[-1] == 1.5
    assert len(plan.alpha_grid(1.5)) == 16


def test_regularizer_plans_sweep_their_axis():
    root = Path(__file__).resolve().parent.parent / "data" / "plans"
    decay = load_plan(root / "desk_weight_decay.plan").grid_cells(2048)
    assert [c.config.weight_decay for c in decay] == [0.0, 1e-4, 1e-3, 1e-2]
    assert {(c.config.eta, c.config.batch_size) for c in decay} == {(0.1, 64)}
    aug = load_plan(root / "desk_augment.plan").grid_cells(2048)
    assert len(aug) == 6
    assert [c.config.augment.enabled for c in aug] == [False] * 3 + [True] * 3
