"""Phase spaces, measure-preserving maps and Hölder observables.

Torus points are plain numpy arrays with every coordinate in [0,1); all map
operations re-reduce mod 1 so the canonical representative is maintained.
The distance on the torus is the sup norm lifted to the quotient:
d(x, y) = max_i min_k |x_i - y_i - k|.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng as _rng

__all__ = [
    "wrap",
    "torus_distance",
    "ToralAutomorphism",
    "IIDTorusDriver",
    "Observable",
    "SpecialFlowSystem",
    "FlowPoint",
    "toral_step",
    "orbit",
    "holder_ratio_estimate",
    "special_flow_evolve",
    "flow_crossing_count",
]

_EIG_TOL = 1e-9


def wrap(x):
    """Canonical torus representative: every coordinate reduced to [0,1)."""
    return np.asarray(x, dtype=float) % 1.0


def torus_distance(x, y):
    """Quotient sup distance on the torus, broadcast over leading axes."""
    delta = wrap(np.asarray(x) - np.asarray(y))
    delta = np.minimum(delta, 1.0 - delta)
    return delta.max(axis=-1)


@dataclass(frozen=True, eq=False)
class ToralAutomorphism:
    """Unimodular hyperbolic integer matrix acting on the d-torus.

    Rejected at construction unless |det| = 1 and no eigenvalue has modulus
    1 within 1e-9 (the hyperbolicity gate; hyperbolic unimodular
    automorphisms are ergodic).
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if not np.array_equal(m, np.round(m)):
            raise ValueError("matrix entries must be integers")
        m = m.astype(np.int64)
        det = round(float(np.linalg.det(m.astype(float))))
        if abs(det) != 1:
            raise ValueError(f"|det| must be 1, got {det}")
        mods = np.abs(np.linalg.eigvals(m.astype(float)))
        if np.any(np.abs(mods - 1.0) <= _EIG_TOL):
            raise ValueError("automorphism is not hyperbolic: eigenvalue on the unit circle")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def step(self, x):
        """Apply the map once; x has shape (..., d)."""
        return (np.asarray(x, dtype=float) @ self.matrix.T.astype(float)) % 1.0

    def orbit_batch(self, x0, n):
        """Orbit array of shape (n, M, d) starting at x0 of shape (M, d)."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        out = np.empty((n,) + x0.shape)
        if n == 0:
            return out
        x = x0 % 1.0
        for k in range(n):
            out[k] = x
            if k + 1 < n:
                x = self.step(x)
        return out


@dataclass(frozen=True)
class IIDTorusDriver:
    """Surrogate driver whose orbit points are i.i.d. uniform on the torus.

    Not a deterministic map: each step after the first is a fresh uniform
    point derived (counter-based) from the initial point's bit pattern, so
    orbit_batch is a pure function of x0 and safe under any worker split.
    """

    dim: int = 2

    def step(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dim)
        keys = _rng.keys_from_points(flat)
        fresh = _rng.counter_uniforms(keys, 1, self.dim)[0]
        return fresh.reshape(x.shape)

    def orbit_batch(self, x0, n):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        out = np.empty((n,) + x0.shape)
        if n == 0:
            return out
        out[0] = x0 % 1.0
        if n > 1:
            keys = _rng.keys_from_points(out[0])
            out[1:] = _rng.counter_uniforms(keys, n - 1, self.dim)
        return out


@dataclass
class Observable:
    """Vector-valued Hölder function on the phase space.

    `fn` is vectorized: input (..., dim_in), output (..., dim_out).
    `holder_constant` and `sup_bound`, when declared, are bounds that the
    empirical estimates must respect.
    """

    dim_out: int
    eta: float
    fn: Callable[[np.ndarray], np.ndarray]
    holder_constant: Optional[float] = None
    sup_bound: Optional[float] = None
    name: str = ""
    subtracted_mean: Optional[np.ndarray] = None
    analytic_mean_zero: bool = False

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("Hölder exponent must lie in (0, 1]")

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


@dataclass
class SpecialFlowSystem:
    """Suspension flow data: base map, positive bounded roof function."""

    base: object
    roof: Observable
    roof_inf: float
    roof_sup: float

    def __post_init__(self):
        if self.roof.dim_out != 1:
            raise ValueError("roof must be scalar valued")
        if not (0.0 < self.roof_inf <= self.roof_sup < np.inf):
            raise ValueError("need 0 < roof_inf <= roof_sup < inf")

    def roof_values(self, omegas):
        """Roof evaluated on (..., d) points, returned with shape (...)."""
        tau = np.asarray(self.roof(omegas))[..., 0]
        if np.any(tau < self.roof_inf - 1e-12) or np.any(tau > self.roof_sup + 1e-12):
            raise ValueError("roof evaluation violates the declared [roof_inf, roof_sup] bounds")
        return tau


@dataclass
class FlowPoint:
    """Point (base, height) under the roof: 0 <= height < roof(base)."""

    base: np.ndarray
    height: float


def toral_step(A: ToralAutomorphism, x):
    """One application of the automorphism, reduced to [0,1)^d."""
    return A.step(x)


def orbit(A, x, n):
    """[x, Tx, ..., T^{n-1}x]; length n (n = 0 gives an empty array)."""
    if n < 0:
        raise ValueError("orbit length must be nonnegative")
    x = np.asarray(x, dtype=float)
    res = A.orbit_batch(x[None, :], n)
    return res[:, 0, :]


def holder_ratio_estimate(f: Observable, samples, seed=0):
    """Empirical sup of |f(x)-f(y)|_inf / d(x,y)^eta over uniform pairs.

    A lower bound on the Hölder coefficient; never exceeds a declared
    holder_constant.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    gen = _rng.substream(seed, _rng.PAIR_SAMPLES)
    dim = _probe_dim(f)
    x = gen.random((samples, dim))
    y = gen.random((samples, dim))
    d = torus_distance(x, y)
    ok = d > 0
    if not np.any(ok):
        return 0.0
    num = np.abs(f(x[ok]) - f(y[ok])).max(axis=-1)
    return float(np.max(num / d[ok] ** f.eta))


def _probe_dim(f: Observable, max_dim=8):
    # observables carry no input dimension; probe with growing vectors
    for d in range(1, max_dim + 1):
        try:
            out = f(np.zeros((2, d)))
        except Exception:
            continue
        if np.asarray(out).shape == (2, f.dim_out):
            return d
    raise ValueError("could not infer the observable's input dimension")


def special_flow_evolve(sys: SpecialFlowSystem, p: FlowPoint, t: float) -> FlowPoint:
    """Advance (base, height) by flow time t >= 0.

    Moves up at unit speed, dropping to the next base iterate whenever the
    roof is crossed; the result satisfies 0 <= height < roof(base).
    """
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    base = wrap(p.base)
    h = float(p.height) + float(t)
    while True:
        tau = float(sys.roof_values(base[None, :])[0])
        if h < tau:
            return FlowPoint(base=base, height=h)
        h -= tau
        base = sys.base.step(base)


def flow_crossing_count(sys: SpecialFlowSystem, omega, t: float) -> int:
    """n(t) = max{n >= 0 : sum_{k<n} roof(T^k omega) <= t}."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    omega = wrap(omega)
    total = 0.0
    n = 0
    while True:
        tau = float(sys.roof_values(omega[None, :])[0])
        if total + tau > t:
            return n
        total += tau
        n += 1
        omega = sys.base.step(omega)


def crossing_counts_batch(sys: SpecialFlowSystem, omegas, t_grid, n_max):
    """Crossing counts for a batch: counts[g, m] = n(t_grid[g], omega_m).

    Uses prefix sums of the roof along each orbit; n_max must exceed every
    count that can occur (t_max / roof_inf is always enough).
    """
    omegas = np.atleast_2d(omegas)
    orb = sys.base.orbit_batch(omegas, n_max)
    tau = sys.roof_values(orb)                      # (n_max, M)
    csum = np.cumsum(tau, axis=0)                   # sum_{k<=n} tau
    t_grid = np.asarray(t_grid, dtype=float)
    counts = np.empty((t_grid.size, omegas.shape[0]), dtype=np.int64)
    for m in range(omegas.shape[0]):
        counts[:, m] = np.searchsorted(csum[:, m], t_grid, side="right")
    return counts, csum
