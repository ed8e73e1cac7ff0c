"""Experiment plan files: ``[section]`` headers with ``key = value`` lines.

Every key has a default; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from mergelab import nets
from mergelab.data import AugmentSpec, Dataset, TaskSplits, make_synthetic, read_image_binary
from mergelab.optim import DECAY_SHAPES, TrainConfig
from mergelab.protocol import BifurcationPlan, trunk_config

logger = logging.getLogger(__name__)


class PlanError(ValueError):
    """Invalid plan file or override."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "kind": "synthetic",
        "n_train": 2048,
        "n_test": 1024,
        "classes": 8,
        "dim": 32,
        "task_id": 0,
        "seed": 0,
        "train_path": "",
        "test_path": "",
    },
    "arch": {
        "kind": "mlp_norm",
        "widths": (32, 256, 256, 8),
        "channels": (16, 32),
        "bn_eps": 1e-5,
    },
    "train": {
        "eta": 0.1,
        "batch_size": 64,
        "momentum": 0.9,
        "weight_decay": 1e-3,
        "warmup_epochs": 1,
        "augment": False,
        "flip_prob": 0.5,
        "crop_pad": 4,
        "jitter": 0.1,
        "checked": False,
    },
    "trunk": {
        "epochs": 60,
        "checkpoint_every": 5,
    },
    "branch": {
        "decay_epochs": 10,
        "decay_shape": "one_minus_sqrt",
        "seed_a": 1,
        "seed_b": 2,
        "budget": "fixed",
        "total_epochs": 0,
    },
    "grid": {
        "eta": (0.003, 0.01, 0.03, 0.1, 0.3, 1.0),
        "batch_size": (16, 64, 256),
        "weight_decay": (0.0, 1e-4, 1e-3, 1e-2),
        "momentum": (0.9,),
        "augment": (False,),
        "seeds": (0, 1, 2),
    },
    "merge": {
        "alpha": 0.5,
        "stats_policy": "interpolate",
        "sweep_points": 21,
        "recompute_batches": 8,
    },
    "analysis": {
        "tau_rel": 0.05,
        "floor": 1e-3,
        "hessian_k": 8,
        "hessian_samples": 1024,
        "hessian_tol": 1e-4,
        "hessian_iters": 200,
        "hessian_mode": "central",
        "noise_samples": 128,
        "collapse_bins": 8,
        "task_extrapolation": True,
    },
    "task_arithmetic": {
        "setting": "both",
        "tasks": 2,
        "pretrain_epochs": 20,
        "finetune_epochs": 10,
        "grid_step": 0.1,
        "grid_max": 1.0,
        "extrapolation_max": 1.5,
    },
    "slice": {
        "resolution": 21,
        "margin": 0.25,
        "checkpoint": -1,
    },
    "output": {
        "dir": "runs/desk",
        "seed": 0,
        "workers": 1,
        "precision": 32,
        "charts": True,
        "digits": 9,
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str, where: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise PlanError(f"{where}: expected on/off, got {text!r}")


def _parse_value(text: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if not items:
                raise PlanError(f"{where}: empty list")
            return tuple(_parse_value(t, default[0], where) for t in items)
        if isinstance(default, bool):
            return _parse_bool(text, where)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        if isinstance(exc, PlanError):
            raise
        raise PlanError(f"{where}: cannot parse {text!r}") from None
    return text.strip()


@dataclass(frozen=True)
class GridCell:
    config_id: str
    config: TrainConfig


@dataclass
class ExperimentPlan:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: dict(v) for s, v in DEFAULTS.items()})
    source: Optional[Path] = None

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise PlanError(f"Unknown plan key [{section}] {key}")
        self.values[section][key] = value

    # ------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.get("output", "seed"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("output", "dir"))

    @property
    def workers(self) -> int:
        return int(self.get("output", "workers"))

    @property
    def precision(self) -> int:
        return int(self.get("output", "precision"))

    @property
    def charts(self) -> bool:
        return bool(self.get("output", "charts"))

    @property
    def checked(self) -> bool:
        return bool(self.get("train", "checked"))

    def augment_spec(self, enabled: Optional[bool] = None) -> AugmentSpec:
        t = self.values["train"]
        return AugmentSpec(
            enabled=t["augment"] if enabled is None else enabled,
            flip_prob=t["flip_prob"],
            crop_pad=t["crop_pad"],
            jitter=t["jitter"],
        )

    def arch(self, input_shape: tuple[int, ...], class_count: int) -> nets.ArchDescriptor:
        a = self.values["arch"]
        if a["kind"] == "tiny_cnn":
            return nets.tiny_cnn(input_shape, class_count, a["channels"], a["bn_eps"])
        if len(input_shape) != 1:
            raise PlanError(f"{a['kind']} needs vector inputs, got shape {input_shape}")
        widths = (input_shape[0],) + tuple(a["widths"][1:-1]) + (class_count,)
        return nets.mlp(widths, norm=a["kind"] == "mlp_norm", bn_eps=a["bn_eps"])

    def load_data(self, task_id: Optional[int] = None) -> TaskSplits:
        d = self.values["data"]
        task = d["task_id"] if task_id is None else task_id
        if d["kind"] == "image":
            if not d["train_path"]:
                raise PlanError("[data] train_path is required for image data")
            train = read_image_binary(d["train_path"], split="train", task_id=task, class_count=d["classes"])
            test = (
                read_image_binary(d["test_path"], split="test", task_id=task, class_count=d["classes"])
                if d["test_path"]
                else Dataset(train.inputs[:0], train.labels[:0], "test", task, train.class_count)
            )
            return TaskSplits(train, test)
        return make_synthetic(task, d["n_train"], d["n_test"], d["classes"], d["dim"], d["seed"])

    def train_config(self, n_train: int, *, eta=None, batch_size=None, momentum=None, weight_decay=None, augment=None, epochs=None) -> TrainConfig:
        t = self.values["train"]
        return trunk_config(
            t["eta"] if eta is None else eta,
            t["batch_size"] if batch_size is None else batch_size,
            n_train,
            momentum=t["momentum"] if momentum is None else momentum,
            weight_decay=t["weight_decay"] if weight_decay is None else weight_decay,
            augment_spec=self.augment_spec(augment),
            warmup_epochs=t["warmup_epochs"],
            epochs=self.get("trunk", "epochs") if epochs is None else epochs,
        )

    def bifurcation_plan(self, config: TrainConfig) -> BifurcationPlan:
        b, m, a = self.values["branch"], self.values["merge"], self.values["analysis"]
        return BifurcationPlan(
            config=config,
            checkpoint_every=self.get("trunk", "checkpoint_every"),
            decay_epochs=b["decay_epochs"],
            decay_shape=b["decay_shape"],
            branch_seeds=(b["seed_a"], b["seed_b"]),
            alpha=m["alpha"],
            budget=b["budget"],
            total_epochs=b["total_epochs"],
            sweep_points=m["sweep_points"],
            stats_policy=m["stats_policy"],
            tau_rel=a["tau_rel"],
            floor=a["floor"],
        )

    def grid_cells(self, n_train: int) -> list[GridCell]:
        """Hyperparameter cells in plan order; ids are zero-padded so sorting keeps that order."""
        g = self.values["grid"]
        cells = []
        combos = itertools.product(g["augment"], g["weight_decay"], g["momentum"], g["batch_size"], g["eta"])
        for idx, (aug, wd, mu, batch, eta) in enumerate(combos):
            config = self.train_config(n_train, eta=eta, batch_size=batch, momentum=mu, weight_decay=wd, augment=aug)
            cells.append(GridCell(f"c{idx:03d}", config))
        return cells

    def alpha_grid(self, upper: float) -> tuple[float, ...]:
        step = self.get("task_arithmetic", "grid_step")
        count = int(round(upper / step)) + 1
        return tuple(round(i * step, 10) for i in range(count))

    def with_overrides(self, **overrides: Any) -> "ExperimentPlan":
        """Copy with ``[output]`` values replaced (command-line flags)."""
        plan = replace(self, values={s: dict(v) for s, v in self.values.items()})
        for key, value in overrides.items():
            if value is not None:
                plan.set("output", key, value)
        validate_plan(plan)
        return plan


def load_plan(
    path: Path | str | None = None,
    text: Optional[str] = None,
    *,
    base: Optional[dict[str, dict[str, Any]]] = None,
) -> ExperimentPlan:
    """Parse a plan; ``base`` values (application config) sit between defaults and the file."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    source = None
    if text is None and path is not None:
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(source)
        text = source.read_text(encoding="utf-8")
    try:
        parser.read_string(text or "")
    except configparser.Error as exc:
        raise PlanError(f"Malformed plan: {exc}") from None
    plan = ExperimentPlan(source=source)
    for section, keys in (base or {}).items():
        for key, value in keys.items():
            plan.set(section, key, value)
    for section in parser.sections():
        if section not in DEFAULTS:
            raise PlanError(f"Unknown plan section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise PlanError(f"Unknown plan key [{section}] {key}")
            plan.values[section][key] = _parse_value(raw, DEFAULTS[section][key], f"[{section}] {key}")
    validate_plan(plan)
    return plan


def validate_plan(plan: ExperimentPlan) -> None:
    """Surface precondition violations before any training starts."""
    g, t = plan.values["grid"], plan.values["train"]
    etas = list(g["eta"]) + [t["eta"]]
    batches = list(g["batch_size"]) + [t["batch_size"]]
    momenta = list(g["momentum"]) + [t["momentum"]]
    decays = list(g["weight_decay"]) + [t["weight_decay"]]
    if any(not eta > 0 for eta in etas):
        raise PlanError(f"Learning rates must be positive: {etas}")
    if any(b < 1 for b in batches):
        raise PlanError(f"Batch sizes must be >= 1: {batches}")
    if any(not 0.0 <= mu < 1.0 for mu in momenta):
        raise PlanError(f"Momentum must be in [0, 1): {momenta}")
    if any(wd < 0 for wd in decays):
        raise PlanError(f"Weight decay must be >= 0: {decays}")
    d = plan.values["data"]
    if max(batches) > d["n_train"] and d["kind"] == "synthetic":
        raise PlanError(f"Batch size {max(batches)} exceeds n_train {d['n_train']}")
    if d["kind"] not in ("synthetic", "image"):
        raise PlanError(f"Unknown data kind {d['kind']!r}")
    if plan.get("arch", "kind") not in nets.ARCH_KINDS:
        raise PlanError(f"Unknown architecture {plan.get('arch', 'kind')!r}")
    if plan.get("branch", "decay_shape") not in DECAY_SHAPES:
        raise PlanError(f"Unknown decay shape {plan.get('branch', 'decay_shape')!r}")
    if plan.get("branch", "budget") not in ("fixed", "total"):
        raise PlanError("[branch] budget must be fixed or total")
    if plan.get("branch", "budget") == "total" and plan.get("branch", "total_epochs") <= plan.get("trunk", "epochs"):
        raise PlanError("[branch] total_epochs must exceed [trunk] epochs")
    if plan.get("merge", "stats_policy") not in ("interpolate", "recompute"):
        raise PlanError("[merge] stats_policy must be interpolate or recompute")
    if not 0.0 <= plan.get("merge", "alpha") <= 1.0:
        raise PlanError("[merge] alpha must lie in [0, 1]")
    if plan.get("task_arithmetic", "setting") not in ("a", "b", "both"):
        raise PlanError("[task_arithmetic] setting must be a, b or both")
    if plan.precision not in (32, 64):
        raise PlanError(f"Precision must be 32 or 64, got {plan.precision}")
    if plan.workers < 1:
        raise PlanError("Worker count must be >= 1")
    if plan.get("trunk", "checkpoint_every") < 1 or plan.get("trunk", "epochs") < 1:
        raise PlanError("[trunk] epochs and checkpoint_every must be >= 1")
