from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CELL_STATUSES = ("ok", "diverged", "failed")


def atomic_write_bytes(path: Path | str, data: bytes) -> Path:
    """Write to a temp file in the destination directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: Path | str, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactStore:
    """Bookkeeping for one output directory: hashes, sizes and cell status.

    The manifest is the only file holding timestamps, so artifact bytes stay
    reproducible across reruns.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / MANIFEST_NAME
        self.manifest = self._load()

    # ------------------------------------------------------------------
    def _load(self) -> dict:
        if self.manifest_path.exists():
            try:
                data = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                logger.warning("Manifest corrupted, starting a new one: %s", self.manifest_path)
                data = {}
        else:
            data = {}
        data.setdefault("artifacts", {})
        data.setdefault("cells", {})
        return data

    def save(self) -> Path:
        text = json.dumps(self.manifest, indent=2, sort_keys=True)
        return atomic_write_text(self.manifest_path, text)

    # ------------------------------------------------------------------
    def write_bytes(self, relpath: str, data: bytes) -> Path:
        target = atomic_write_bytes(self.root / relpath, data)
        self.register(target)
        return target

    def write_text(self, relpath: str, text: str) -> Path:
        return self.write_bytes(relpath, text.encode("utf-8"))

    def register(self, path: Path | str) -> dict:
        """Record an artifact already written under the store root."""
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        entry = {
            "sha256": hash_file(path),
            "size": path.stat().st_size,
            "created_at": datetime.now().isoformat(timespec="seconds"),
        }
        self.manifest["artifacts"][rel] = entry
        logger.debug("Artifact %s (%d bytes)", rel, entry["size"])
        return entry

    def set_cell_status(self, cell_id: str, status: str, error: Optional[str] = None) -> None:
        if status not in CELL_STATUSES:
            raise ValueError(f"Unknown cell status {status!r}")
        self.manifest["cells"][cell_id] = {"status": status, "error": error or ""}

    def cell_statuses(self) -> dict[str, str]:
        return {cell: info["status"] for cell, info in self.manifest["cells"].items()}

    def verify(self) -> list[str]:
        """Relative paths whose bytes no longer match the recorded hash."""
        bad = []
        for rel, entry in sorted(self.manifest["artifacts"].items()):
            path = self.root / rel
            if not path.exists() or hash_file(path) != entry["sha256"]:
                bad.append(rel)
        return bad
