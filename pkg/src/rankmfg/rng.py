"""Counter-based random streams.

Every draw is addressed by ``(seed, label, step, position)``.  A stream for a
given ``(seed, label, step)`` is a Philox key; the ``position`` (usually a path
index) selects the counter.  Any subset of positions can therefore be generated
independently and in any order, which keeps Monte Carlo output identical no
matter how paths are split across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_DRAWS_PER_COUNTER = 4  # Philox4x64 emits four 64-bit words per counter value


def _label_words(label: str) -> tuple[int, int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")


def stream_key(seed: int, label: str, step: int) -> np.ndarray:
    """128-bit Philox key for one (seed, label, step) triple."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(*_label_words(label), step))
    return ss.generate_state(2, dtype=np.uint64)


def uniforms(seed: int, label: str, step: int, start: int, count: int) -> np.ndarray:
    """Uniforms in the open interval (0, 1) at positions ``start .. start+count-1``."""
    if count <= 0:
        return np.empty(0)
    block, skip = divmod(start, _DRAWS_PER_COUNTER)
    bitgen = np.random.Philox(key=stream_key(seed, label, step), counter=[block, 0, 0, 0])
    raw = bitgen.random_raw(skip + count)[skip:]
    # top 53 bits, offset by half an ulp so 0 and 1 are never produced
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, label: str, step: int, start: int, count: int) -> np.ndarray:
    """Standard normals by inverse CDF, so each position consumes exactly one word."""
    return ndtri(uniforms(seed, label, step, start, count))


def normals_at(seed: int, label: str, step: int, positions: np.ndarray) -> np.ndarray:
    """Standard normals at arbitrary (not necessarily contiguous) positions."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return np.empty(0)
    lo, hi = int(positions.min()), int(positions.max())
    if hi - lo + 1 == positions.size and np.all(np.diff(positions) == 1):
        return normals(seed, label, step, lo, positions.size)
    span = normals(seed, label, step, lo, hi - lo + 1)
    return span[positions - lo]


def derive_seed(seed: int, label: str) -> int:
    """Child seed for a labelled sub-experiment (stage name, replicate, ...)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=_label_words(label))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generator(seed: int, label: str) -> np.random.Generator:
    """An ordinary sequential generator for one-off draws (initial measures, bootstrap)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label, 0)))
