"""Seed derivation and counter-based uniform streams.

Every random draw in the package is a pure function of a 64-bit stream seed
and a draw counter, so the order in which rollouts are generated (one at a
time, batched, or in parallel) never changes what is sampled.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * _C1) & MASK64
    z = ((z ^ (z >> 27)) * _C2) & MASK64
    return z ^ (z >> 31)


def derive_seed(global_seed: int, step: int, prompt_index: int, rollout_index: int) -> int:
    """Stable 64-bit seed for one (step, prompt, rollout) cell of a run."""
    h = mix64(global_seed + GOLDEN)
    for v in (step, prompt_index, rollout_index):
        h = mix64((h ^ (v & MASK64)) + GOLDEN)
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_C1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_C2)
    return z ^ (z >> np.uint64(31))


def as_seed_array(seeds) -> np.ndarray:
    if isinstance(seeds, np.ndarray):
        if seeds.dtype == np.uint64:
            return seeds.ravel()
        if seeds.dtype.kind not in "iuO":
            raise TypeError(f"seeds must be integers, got dtype {seeds.dtype}")
        seeds = seeds.ravel().tolist()
    elif isinstance(seeds, (int, np.integer)):
        seeds = [seeds]
    # go through Python ints: numpy would promote a mix of large and small seeds to float64
    return np.array([int(s) & MASK64 for s in seeds], dtype=np.uint64)


def uniforms(seeds: np.ndarray, counter: int) -> np.ndarray:
    """Draw number ``counter`` of each stream as a float in [0, 1).

    ``seeds`` must be a uint64 array; the result has the same shape.
    """
    state = seeds + np.uint64(((counter + 1) * GOLDEN) & MASK64)
    return (_mix64_array(state) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def rng_for(*fields: int) -> np.random.Generator:
    """A numpy Generator keyed on a derived seed, for bookkeeping draws (shuffles, choices)."""
    padded = list(fields) + [0] * (4 - len(fields))
    return np.random.default_rng(derive_seed(*padded[:4]))
