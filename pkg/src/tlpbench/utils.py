"""Seeding and file helpers shared by every module."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic child seed for ``(base, *keys)``.

    Uses numpy's SeedSequence spawn keys so that child streams are
    statistically independent of each other and of the base stream.
    """
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(base: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
