"""Shared plumbing: seeded RNG derivation, validation, CSV emission."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def stable_tag(tag) -> int:
    """Map a string or int tag to a stable 32-bit integer (process independent)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Derive an independent generator from a root seed and a tag path.

    The same (seed, tags) pair always yields the same stream, which is what
    makes corpus generation, bootstraps, and training byte-reproducible.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_tag(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def check_finite(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def fmt(value) -> str:
    """Deterministic scalar formatting for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return "nan"
        if np.isposinf(value):
            return "inf"
        if np.isneginf(value):
            return "-inf"
        return f"{float(value):.12g}"
    return str(value)


def write_csv(path, header, rows) -> None:
    """Write rows of scalars with a fixed float format (byte reproducible)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def config_hash(obj) -> str:
    """Stable hash of a JSON-serialisable config mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
