"""Counter-based random numbers for reproducible parallel Monte Carlo.

Every trajectory owns a 64-bit stream key derived from the master seed and
its index. The ``j``-th normal of step ``k`` is a pure function of
``(key, k * stride + j)``, so results never depend on batching, worker
count or scheduling.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)
_INV53 = 2.0 ** -53


def mix64(z):
    """SplitMix64 finalizer (a bijection on 64-bit integers)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def stream_keys(seed, indices):
    """Stream keys for trajectory ``indices`` under master ``seed``.

    Distinct indices give distinct keys because every step is a bijection.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        master = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + GOLDEN)
        return mix64(master ^ mix64(idx + GOLDEN))


def uniforms(keys, counter):
    """Open-interval uniforms ``u in (0, 1)`` for each key at ``counter``."""
    with np.errstate(over="ignore"):
        h = mix64(keys + np.uint64(counter) * GOLDEN)
    return ((h >> _S11).astype(np.float64) + 0.5) * _INV53


def normals(keys, counter):
    """Standard normals by inversion of :func:`uniforms`."""
    return ndtri(uniforms(keys, counter))


def normal_block(keys, step, stride, count):
    """Normals ``(len(keys), count)`` for ``step``, drawn at counters
    ``step * stride + j`` for ``j < count``."""
    counters = (np.uint64(step * stride) + np.arange(count, dtype=np.uint64)) * GOLDEN
    with np.errstate(over="ignore"):
        h = mix64(keys[:, None] + counters[None, :])
    return ndtri(((h >> _S11).astype(np.float64) + 0.5) * _INV53)
