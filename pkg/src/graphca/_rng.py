"""Seed handling: named numpy streams and a counter-based pair hash."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = (
    "latents",
    "mixing-init",
    "link-model",
    "links",
    "model-init",
    "batches",
    "permutations",
    "test-latents",
)

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a root seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(key,)))


def derive_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**63 - 1, dtype=np.int64))


def splitmix64(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def pair_uniform(seed: int, i, j) -> np.ndarray:
    """Uniform [0, 1) value keyed by (seed, min(i, j), max(i, j)).

    Pure function of its arguments, so the same unordered pair always maps
    to the same number no matter when or how often it is asked for.
    """
    i = np.atleast_1d(np.asarray(i, dtype=np.int64))
    j = np.atleast_1d(np.asarray(j, dtype=np.int64))
    lo = np.minimum(i, j).astype(np.uint64)
    hi = np.maximum(i, j).astype(np.uint64)
    base = splitmix64(np.full(lo.shape, int(seed) & _MASK64, dtype=np.uint64))
    z = splitmix64(splitmix64(base ^ lo) ^ hi)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
