#!/usr/bin/env python3
"""Application layer for the merging lab.

Holds the on-disk layout (config, log, run and report directories), the JSON
application config and the logging setup shared by the command-line tools.
Experiment logic lives in the ``mergelab`` package; this module stays free of
numerics so initialization scripts can import it cheaply.
"""
from __future__ import annotations

import json
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any

from utils.artifact_store import atomic_write_text

APP_NAME = "mergelab"
DATA_DIR = Path("data")
CONFIG_FILE = DATA_DIR / "lab_config.json"
PLANS_DIR = DATA_DIR / "plans"
DEFAULT_PLAN = PLANS_DIR / "desk_sweep.plan"

LOG_PATH = DATA_DIR / "lab.log"
logging.basicConfig(level=logging.INFO, format="[%(levelname)s] %(name)s: %(message)s")
logger = logging.getLogger(__name__)

CONFIG_DEFAULTS: dict[str, Any] = {
    "log_level": "INFO",
    "runs_dir": "runs",
    "reports_dir": "reports",
    "workers": 1,
    "precision": 32,
    "charts": True,
    "checked_mode": False,
    "bn_eps": 1e-5,
    "transition_tau_rel": 0.05,
    "transition_floor": 1e-3,
    "hessian_sample_size": 1024,
    "hessian_k": 8,
    "csv_digits": 9,
}


class LabCore:
    """Config and bookkeeping helpers used by every entry point."""

    def __init__(self, config_file: Path | str = CONFIG_FILE, log_path: Path | str | None = LOG_PATH):
        self.config_file = Path(config_file)
        self.config_file.parent.mkdir(parents=True, exist_ok=True)
        self.log_path = Path(log_path) if log_path else None

    # ------------------------------------------------------------------
    # Config helpers
    def read_config(self) -> dict[str, Any]:
        if self.config_file.exists():
            try:
                return json.loads(self.config_file.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                logger.warning("Config file corrupted, resetting")
        return {}

    def write_config(self, data: dict[str, Any]) -> None:
        atomic_write_text(self.config_file, json.dumps(data, indent=2))

    def get_app_config(self) -> dict[str, Any]:
        """Return the config file completed with defaults."""
        cfg = self.read_config()
        for key, value in CONFIG_DEFAULTS.items():
            cfg.setdefault(key, value)
        return cfg

    def ensure_directories(self) -> None:
        cfg = self.get_app_config()
        for path in (self.config_file.parent, PLANS_DIR, Path(cfg["runs_dir"]), Path(cfg["reports_dir"])):
            path.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------------
    # Logging
    def configure_logging(self) -> None:
        self._configure_logging(self.get_app_config().get("log_level", "INFO"))

    def _configure_logging(self, level_name: str) -> None:
        level = getattr(logging, str(level_name).upper(), logging.INFO)
        root = logging.getLogger()
        root.setLevel(level)
        for h in root.handlers:
            h.setLevel(level)
        if self.log_path is None:
            return
        if all(not isinstance(h, RotatingFileHandler) for h in root.handlers):
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            handler = RotatingFileHandler(self.log_path, maxBytes=1_000_000, backupCount=3)
            handler.setLevel(level)
            handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
            root.addHandler(handler)
