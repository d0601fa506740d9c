"""Seed derivation, config hashing, and atomic file output."""

import hashlib
import json
import os
import tempfile

import numpy as np


def rng_for(seed: int, *names: str | int) -> np.random.Generator:
    """Derive an independent generator from a root seed and a stream name.

    Streams are keyed by hashing the names, so ``rng_for(7, "gen")`` and
    ``rng_for(7, "train")`` never collide and are stable across runs and
    platforms.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        h = hashlib.sha256(str(name).encode("utf-8")).digest()
        keys.append(int.from_bytes(h[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(keys))


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace churn, for hashing and diffs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)!r}")


def config_hash(obj) -> str:
    """Short stable digest of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def atomic_write_text(path: str, text: str) -> None:
    """Write via temp file + rename so readers never see partial output."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fsum_mean(values) -> float:
    """Order-independent mean (exact compensated summation)."""
    import math

    vals = list(values)
    if not vals:
        return 0.0
    return math.fsum(vals) / len(vals)
