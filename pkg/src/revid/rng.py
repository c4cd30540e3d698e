"""Counter-based random draws keyed by (seed, tag, firm, period).

Every shock in a simulation is a pure function of its key, so two runs with
the same seed produce identical draws regardless of firm count, period count
or evaluation order.  This is what makes matched-seed comparisons of
observationally equivalent structures exact.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# Stream tags; distinct per shock family so draws never collide.
TAG_ETA = 11
TAG_EPS = 12
TAG_K = 13
TAG_L = 14
TAG_Z = 15
TAG_OMEGA0 = 16
TAG_LABOR = 17
TAG_EXTRA = 18


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; a bijective avalanche on uint64."""
    x = (x + _GOLDEN) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(30)
    x = (x * _MIX1) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(27)
    x = (x * _MIX2) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(31)
    return x


def _key(seed: int, tag: int, firm: np.ndarray, period: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        k = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix(np.uint64(tag)))
        out = _mix(k + _mix(np.asarray(firm, dtype=np.uint64)))
        out = _mix(out + _mix(np.uint64(period)))
    return out


def uniform(seed: int, tag: int, firm: np.ndarray, period: int) -> np.ndarray:
    """Uniform(0,1) draw per firm, strictly inside the open interval."""
    raw = _key(seed, tag, firm, period)
    return (raw.astype(np.float64) + 0.5) / 2.0**64


def normal(seed: int, tag: int, firm: np.ndarray, period: int) -> np.ndarray:
    """Standard normal draw per firm via the inverse CDF."""
    return ndtri(uniform(seed, tag, firm, period))


def bernoulli(seed: int, tag: int, firm: np.ndarray, period: int, p: float = 0.5) -> np.ndarray:
    return (uniform(seed, tag, firm, period) < p).astype(np.float64)
