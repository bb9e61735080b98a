"""Shared plumbing: labeled RNG streams, atomic file writes, hashing."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np


def _label_entropy(label: str) -> int:
    return int(hashlib.sha256(label.encode("utf-8")).hexdigest()[:16], 16)


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible stream for one purpose under a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _label_entropy(label)]))


def derive_seed(master_seed: int, index: int) -> int:
    """Per-case seed that does not depend on how many cases are generated."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def quantize2(value: float) -> float:
    """Snap to 2 decimals through the printed form, so CSV round trips exactly."""
    return float(f"{float(value):.2f}")
