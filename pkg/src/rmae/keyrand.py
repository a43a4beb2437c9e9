"""Counter-based keyed random numbers.

Every draw is a pure function of an integer key tuple, so consumers can
evaluate decisions in any order (or in parallel) and still reproduce the
exact same values.  The mixer is the splitmix64 finalizer chained over the
key components; it passes the calibration tests in the mask suite, which
is all this package asks of it.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def hash_key(seed: int, *keys: int) -> int:
    """Collapse (seed, k1, k2, ...) into one well-mixed 64-bit value."""
    h = _mix64(int(seed) + _GOLDEN)
    for k in keys:
        h = _mix64(h + _GOLDEN + (int(k) & _MASK64))
    return h


def uniform(seed: int, *keys: int) -> float:
    """Deterministic draw in [0, 1) for the given key tuple."""
    return (hash_key(seed, *keys) >> 11) * 2.0 ** -53


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a named stream, e.g. (seed, epoch, frame index)."""
    return hash_key(seed, *keys)


def uniform_array(seed: int, *key_arrays: np.ndarray) -> np.ndarray:
    """Vectorized `uniform`: one draw per row of the broadcast key arrays.

    Each positional array supplies one key component; all are broadcast
    against each other.  Matches the scalar path bit-for-bit.
    """
    arrs = np.broadcast_arrays(*[np.asarray(a) for a in key_arrays])
    h = np.full(arrs[0].shape, _mix64(seed + _GOLDEN), dtype=np.uint64)
    golden = np.uint64(_GOLDEN)
    m1 = np.uint64(_MIX1)
    m2 = np.uint64(_MIX2)
    for a in arrs:
        h = h + golden + a.astype(np.uint64)
        h = (h ^ (h >> np.uint64(30))) * m1
        h = (h ^ (h >> np.uint64(27))) * m2
        h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
