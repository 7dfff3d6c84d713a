"""Seeded, worker-independent random streams.

Every random quantity in the library is drawn from a stream addressed by
(seed, purpose, index...).  Streams are materialized on demand, so the same
trajectory index yields the same draws no matter how the work is chunked
across processes.
"""

import numpy as np

# purpose tags for derived streams (stable, part of the determinism contract)
INITIAL_POINTS = 1
GAUSSIAN_REF = 2
COVARIANCE = 3
PAIR_SAMPLES = 4
COUPLING = 5
COV_CHECK = 6
GENERIC = 9


def substream(seed, *key):
    """Generator for the stream addressed by (seed, *key).

    The same (seed, key) always yields the same PCG64 stream, on any platform
    and under any worker count.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def index_streams(seed, purpose, start, stop):
    """List of per-trajectory generators for indices [start, stop)."""
    return [substream(seed, purpose, i) for i in range(start, stop)]


def uniform_points(seed, purpose, start, stop, dim):
    """One uniform point in [0,1)^dim per trajectory index in [start, stop).

    Drawn from per-index streams so that any chunking of the index range
    produces identical rows.
    """
    out = np.empty((stop - start, dim))
    for i in range(start, stop):
        out[i - start] = substream(seed, purpose, i).random(dim)
    return out


_MIX_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_MUL2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z):
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2^64
    z = (z ^ (z >> np.uint64(30))) * _MIX_MUL1
    z = (z ^ (z >> np.uint64(27))) * _MIX_MUL2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(keys, n_steps, dim):
    """Counter-based uniforms: shape (n_steps, len(keys), dim) in [0,1).

    `keys` is a uint64 array; entry (s, m, j) depends only on
    (keys[m], s, j), so any batch split reproduces the same numbers.
    Quality is splitmix64-grade, adequate for Monte Carlo surrogates.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    s = (np.arange(n_steps, dtype=np.uint64) + np.uint64(1)) * _GOLDEN
    j = (np.arange(dim, dtype=np.uint64) + np.uint64(1)) * _MIX_MUL2
    z = _mix64(keys[None, :, None] + s[:, None, None] + _mix64(j)[None, None, :])
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def keys_from_points(points):
    """Fold the bit patterns of float rows into one uint64 key per row."""
    bits = np.ascontiguousarray(points, dtype=np.float64).view(np.uint64)
    key = np.zeros(bits.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(bits.shape[1]):
            salt = np.uint64((int(_GOLDEN) * (j + 1)) & 0xFFFFFFFFFFFFFFFF)
            key = _mix64(key ^ (bits[:, j] + salt))
    return key
