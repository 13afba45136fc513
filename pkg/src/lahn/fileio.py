"""Atomic file writes: temp file in the destination directory, then rename.

Every artifact this package writes (datasets, vocabularies, metrics logs,
checkpoints, embedding exports) goes through one of these helpers so that a
crash mid-write never leaves a truncated file at the final path.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Callable


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    def write(fh) -> None:
        fh.write(data)

    atomic_write(path, write)


def atomic_write(path: str | os.PathLike, write: Callable) -> None:
    """Call ``write(fh)`` on a temp file, fsync, then rename onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
