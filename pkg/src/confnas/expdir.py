"""Experiment directory layout and atomic file writes."""
from __future__ import annotations

import fcntl
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file, fsync, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def append_line_locked(path, line: str) -> None:
    """Append one line under an advisory exclusive lock (results ledger)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            fh.write(line.rstrip("\n") + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


class ExperimentDir:
    """`<root>/<benchmark>/<method>/seed<k>/`, `<root>/retrain/...`, `<root>/reports/`."""

    def __init__(self, root):
        self.root = Path(root)

    def trial(self, benchmark: str, method: str, seed: int) -> Path:
        return self.root / benchmark / method / f"seed{seed}"

    def retrain(self, benchmark: str, method: str, hp_id: str, seed: int = 0) -> Path:
        return self.root / "retrain" / benchmark / method / hp_id / f"seed{seed}"

    def selected_genotype(self, benchmark: str, method: str) -> Path:
        return self.root / benchmark / method / "selected_genotype.txt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def ledger(self) -> Path:
        return self.root / "results.tsv"
