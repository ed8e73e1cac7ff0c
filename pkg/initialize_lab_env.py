#!/usr/bin/env python3
"""Bootstrap script for the lab environment.

Creates the data, plan, run and report directories and seeds
``data/lab_config.json`` so the command-line tools start from known values.
"""
from __future__ import annotations

import argparse
from typing import Optional, Sequence

from lab_core import CONFIG_DEFAULTS, CONFIG_FILE, LabCore


def seed_config(core: LabCore, *, force: bool = False) -> bool:
    """Write the default config; returns True when the file was (re)written."""
    cfg = {} if force else core.read_config()
    if cfg and not force:
        return False
    for key, value in CONFIG_DEFAULTS.items():
        cfg.setdefault(key, value)
    core.write_config(cfg)
    return True


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="Initialize the lab environment")
    parser.add_argument("--force", action="store_true", help="Overwrite the seeded config if it already exists")
    args = parser.parse_args(argv)

    core = LabCore(log_path=None)
    written = seed_config(core, force=args.force)
    core.ensure_directories()
    if argv is None:
        state = "written" if written else "kept"
        print(f"Config file {state}: {CONFIG_FILE}")


if __name__ == "__main__":
    main()
