"""Birkhoff-sum statistics for chaotic drivers.

Covers the asymptotic covariance of normalized ergodic sums (variance plus
the symmetrized lag series), decorrelation profiling, convergence-rate
experiments against a discretized Gaussian reference, the telescoping
coboundary checks, and characteristic-function diagnostics.

Expectations over the invariant measure are Monte Carlo averages over
i.i.d. uniform initial points (Lebesgue is invariant for toral
automorphisms), never single-orbit time averages.
"""

import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np

from . import rng as _rng
from .dynamics import Observable
from .metrics import FiniteMeasure, GaussianSpec, gaussian_sample, ky_fan_weighted, prokhorov
from .stats import RateFit, fit_line, fit_loglog

__all__ = [
    "CovMatrix",
    "CovarianceEstimate",
    "DecorrelationProfile",
    "birkhoff_sum",
    "center_observable",
    "asymptotic_covariance",
    "covariance_congruence_check",
    "decorrelation_profile",
    "clt_rate_experiment",
    "CltRateResult",
    "coboundary_observable",
    "coboundary_degenerate_experiment",
    "char_discrepancy",
    "yurinskii_integral",
]

_CENTER_TOL = 1e-8
_DEGENERACY_GATE = 1e-3
_CHUNK = 1024


@dataclass(eq=False)
class CovMatrix:
    """Symmetric matrix with eigenvalues above -1e-8 (noise-level PSD)."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError("covariance matrix must be square")
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > 1e-10 * scale:
            raise ValueError("matrix not symmetric within 1e-10")
        m = 0.5 * (m + m.T)
        if np.linalg.eigvalsh(m).min() < -1e-8 * scale:
            raise ValueError("matrix has eigenvalues below the -1e-8 noise floor")
        self.entries = m

    def clamped(self):
        """PSD projection: negative eigenvalues clipped to zero."""
        evals, vecs = np.linalg.eigh(self.entries)
        return CovMatrix((vecs * np.clip(evals, 0.0, None)) @ vecs.T)

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.entries).min())


@dataclass(eq=False)
class CovarianceEstimate:
    cov: CovMatrix
    last_lag_norm: float
    truncation_warning: bool


@dataclass(eq=False)
class DecorrelationProfile:
    lags: list
    cov_norms: list
    stderrs: list
    fitted_delta: float
    fitted_poly_degree: int
    r2: float
    status: str   # "ok" | "no-fit"


def birkhoff_sum(driver, f: Observable, n: int, omega):
    """S_n(f)(omega) = sum_{k<n} f(T^k omega); S_0 = 0.

    Accumulates sequentially so that S_{n+m} equals S_n plus the shifted
    S_m bit for bit.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    omega = np.asarray(omega, dtype=float)
    single = omega.ndim == 1
    x = np.atleast_2d(omega) % 1.0
    total = np.zeros((x.shape[0], f.dim_out))
    for _ in range(n):
        total = total + f(x)
        x = driver.step(x)
    return total[0] if single else total


def _torus_grid(dim, points_per_axis):
    """Midpoint tensor grid on [0,1)^dim, shape (points_per_axis^dim, dim)."""
    axis = (np.arange(points_per_axis) + 0.5) / points_per_axis
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def lebesgue_mean(f: Observable, dim, points_per_axis=64):
    """Tensor-grid mean of f over the torus (spectrally accurate for
    smooth periodic integrands)."""
    grid = _torus_grid(dim, points_per_axis)
    return f(grid).mean(axis=0)


class _ShiftedFn:
    """Picklable wrapper for fn minus a constant."""

    def __init__(self, fn, shift):
        self.fn = fn
        self.shift = shift

    def __call__(self, x):
        return self.fn(x) - self.shift


def center_observable(f: Observable, dim, quadrature_points=64):
    """f minus its Lebesgue mean; the subtracted mean is recorded."""
    if quadrature_points < 2:
        raise ValueError("need at least 2 quadrature points per axis")
    mean = lebesgue_mean(f, dim, quadrature_points)
    return Observable(dim_out=f.dim_out, eta=f.eta, fn=_ShiftedFn(f.fn, mean),
                      holder_constant=f.holder_constant, sup_bound=None,
                      name=(f.name + "-centered") if f.name else "centered",
                      subtracted_mean=mean)


def _check_centered(f: Observable, dim):
    if f.analytic_mean_zero:
        return
    mean = lebesgue_mean(f, dim, 64)
    if np.abs(mean).max() > _CENTER_TOL:
        raise ValueError(f"observable is not centered (mean {mean!r})")


def _orbit_values(driver, f, n_steps, points):
    """f along orbits: array (n_steps, M, dim_out) for initial points (M, d)."""
    out = np.empty((n_steps, points.shape[0], f.dim_out))
    x = points % 1.0
    for k in range(n_steps):
        out[k] = f(x)
        if k + 1 < n_steps:
            x = driver.step(x)
    return out


def _mc_points(seed, m, dim, purpose=_rng.COVARIANCE):
    # expectation samples are drawn in the parent process only, so one
    # stream suffices (per-index streams are for worker-split ensembles)
    return _rng.substream(seed, purpose).random((m, dim))


def asymptotic_covariance(driver, f: Observable, lag_cap: int, mc_samples: int,
                          seed, check_centered=True) -> CovarianceEstimate:
    """Truncated lag series for the covariance of normalized ergodic sums:
    E[f x f] plus sum_{k<=K} of the two lagged cross terms, symmetrized.

    Monte Carlo over i.i.d. uniform initial points; the norm of the last
    lag term is reported and flags a truncation warning above 10% of the
    partial sum's norm.
    """
    if lag_cap < 0:
        raise ValueError("lag cap must be nonnegative")
    if mc_samples < 100:
        raise ValueError("need at least 100 Monte Carlo samples")
    if check_centered:
        _check_centered(f, driver.dim)
    pts = _mc_points(seed, mc_samples, driver.dim)
    vals = _orbit_values(driver, f, lag_cap + 1, pts)
    base = vals[0]
    total = base.T @ base / mc_samples
    last = np.zeros_like(total)
    for k in range(1, lag_cap + 1):
        ck = base.T @ vals[k] / mc_samples
        last = ck + ck.T
        total = total + last
    total = 0.5 * (total + total.T)
    last_norm = float(np.abs(last).max()) if lag_cap >= 1 else 0.0
    ref = max(float(np.abs(total).max()), 1e-300)
    warn = lag_cap >= 1 and last_norm > 0.1 * ref
    # estimation noise can push tiny eigenvalues slightly negative
    evals, vecs = np.linalg.eigh(total)
    floor = -1e-8 * max(1.0, float(np.abs(total).max()))
    if evals.min() < floor:
        total = (vecs * np.maximum(evals, 0.0)) @ vecs.T
    return CovarianceEstimate(CovMatrix(total), last_norm, warn)


class _RotatedFn:
    """Picklable wrapper for a linear map applied after fn."""

    def __init__(self, fn, mat):
        self.fn = fn
        self.mat = mat

    def __call__(self, x):
        return self.fn(x) @ self.mat.T


def covariance_congruence_check(driver, f: Observable, A, lag_cap=20,
                                mc_samples=20000, seed=0):
    """Compare D(A f) with A D(f) A^T under the same seed.

    Returns (discrepancy, mc_error_bound); the paired estimator makes the
    congruence exact up to floating point, so the discrepancy should sit
    far below the Monte Carlo bound.
    """
    A = np.asarray(A, dtype=float)
    if np.abs(A @ A.T - np.eye(A.shape[0])).max() > 1e-10:
        raise ValueError("matrix must be orthogonal within 1e-10")
    f_rot = Observable(dim_out=f.dim_out, eta=f.eta, fn=_RotatedFn(f.fn, A))
    d_f = asymptotic_covariance(driver, f, lag_cap, mc_samples, seed, check_centered=False)
    d_rot = asymptotic_covariance(driver, f_rot, lag_cap, mc_samples, seed, check_centered=False)
    lhs = d_rot.cov.entries
    rhs = A @ d_f.cov.entries @ A.T
    discrepancy = float(np.abs(lhs - rhs).max())
    mc_bound = 2.0 * (2 * lag_cap + 1) / math.sqrt(mc_samples)
    return discrepancy, mc_bound


def decorrelation_profile(driver, f: Observable, g: Observable, n_max: int,
                          mc_samples: int, seed) -> DecorrelationProfile:
    """|Cov(f, g o T^n)| for n = 0..n_max with a geometric-decay fit.

    The fit runs over the lags whose estimate exceeds 3x its Monte Carlo
    standard error; fewer than 3 such lags yields a no-fit status.
    """
    if n_max < 4:
        raise ValueError("need n_max >= 4")
    pts = _mc_points(seed, mc_samples, driver.dim)
    f_vals = f(pts)
    g_vals = _orbit_values(driver, g, n_max + 1, pts)
    f_c = f_vals - f_vals.mean(axis=0)
    norms, errs = [], []
    for n in range(n_max + 1):
        g_c = g_vals[n] - g_vals[n].mean(axis=0)
        prod = f_c[:, :, None] * g_c[:, None, :]
        cov = prod.mean(axis=0)
        se = prod.std(axis=0) / math.sqrt(mc_samples)
        k = np.unravel_index(np.argmax(np.abs(cov)), cov.shape)
        norms.append(float(np.abs(cov).max()))
        errs.append(float(se[k]))
    norms_a, errs_a = np.asarray(norms), np.asarray(errs)
    keep = norms_a > 3.0 * errs_a
    lags = np.arange(n_max + 1)
    if keep.sum() < 3:
        return DecorrelationProfile(lags.tolist(), norms, errs,
                                    float("nan"), 0, float("nan"), "no-fit")
    slope, _, _, r2 = fit_line(lags[keep], np.log(norms_a[keep]))
    delta = float(np.exp(slope))
    status = "ok" if 0.0 < delta < 1.0 else "no-fit"
    return DecorrelationProfile(lags.tolist(), norms, errs, delta, 0, r2, status)


@dataclass(eq=False)
class CltRateResult:
    fit: Optional[RateFit]
    ns: list
    pi_hats: list
    floor_flags: list
    cov: CovarianceEstimate
    degenerate: bool
    floor: float


def birkhoff_checkpoint_chunk(driver, f: Observable, n_grid, seed, start, stop,
                              purpose=_rng.INITIAL_POINTS):
    """Per-trajectory normalized sums S_n/sqrt(n) at each checkpoint n.

    Initial points come from per-index streams, so any chunking of
    [start, stop) reproduces identical rows.  Returns (len(n_grid),
    stop-start, dim_out).
    """
    pts = _rng.uniform_points(seed, purpose, start, stop, driver.dim)
    n_grid = list(n_grid)
    n_max = max(n_grid)
    out = np.empty((len(n_grid), stop - start, f.dim_out))
    x = pts
    total = np.zeros((stop - start, f.dim_out))
    next_cp = 0
    for k in range(n_max):
        total = total + f(x)
        if k + 1 == n_grid[next_cp]:
            out[next_cp] = total / math.sqrt(n_grid[next_cp])
            next_cp += 1
        if k + 1 < n_max:
            x = driver.step(x)
    return out


def _chunked(total, fn, mapper=None):
    """Apply fn(start, stop) over fixed-size chunks and concatenate along
    the trajectory axis.  Chunk boundaries never depend on worker count."""
    bounds = [(s, min(s + _CHUNK, total)) for s in range(0, total, _CHUNK)]
    if mapper is None:
        parts = [fn(s, e) for s, e in bounds]
    else:
        parts = mapper(fn, bounds)
    return np.concatenate(parts, axis=-2)


def clt_rate_experiment(driver, f: Observable, n_grid, ensemble: int,
                        gaussian_m: int, seed, tol: float = 2e-3,
                        lag_cap: int = 40, mc_samples: int = 200_000,
                        mapper=None, check_centered=True) -> CltRateResult:
    """Measured Prokhorov distance of S_n/sqrt(n) to its Gaussian limit.

    For every n in the grid the empirical law of an ensemble of normalized
    sums is compared against an m-sample discretization of N(0, D(f));
    the log-log slope of distance against n is the reported rate.  The
    distance is floored at 1/(2 gaussian_m), the metric's resolution at
    that discretization.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if len(n_grid) < 3 or len(set(n_grid)) != len(n_grid):
        raise ValueError("n_grid must be strictly increasing with >= 3 entries")
    cov = asymptotic_covariance(driver, f, lag_cap, mc_samples, seed,
                                check_centered=check_centered)
    clamped = cov.cov.clamped()
    degenerate = clamped.min_eigenvalue() <= _DEGENERACY_GATE
    sums = _chunked(ensemble,
                    partial(birkhoff_checkpoint_chunk, driver, f, n_grid, seed),
                    mapper)
    if float(np.abs(clamped.entries).max()) < 1e-12:
        # identically degenerate limit: both laws are the point mass at 0
        pis = []
        for i in range(len(n_grid)):
            emp = np.abs(sums[i]).max(axis=-1)
            pis.append(ky_fan_weighted(emp, np.full(ensemble, 1.0 / ensemble)))
        floor = 1.0 / (2.0 * gaussian_m)
        return CltRateResult(None, n_grid, pis, [p <= floor for p in pis],
                             cov, True, floor)
    ref = gaussian_sample(GaussianSpec(np.zeros(f.dim_out), clamped.entries),
                          gaussian_m, seed)
    floor = 1.0 / (2.0 * gaussian_m)
    pi_hats, flags = [], []
    for i in range(len(n_grid)):
        emp = FiniteMeasure.from_samples(sums[i])
        pi = prokhorov(emp, ref, tol)
        flags.append(pi < floor)
        pi_hats.append(max(pi, floor))
    fit = fit_loglog(n_grid, pi_hats, floor=floor)
    return CltRateResult(fit, n_grid, pi_hats, flags, cov, degenerate, floor)


class _CoboundaryFn:
    """Picklable h - h o T."""

    def __init__(self, h_fn, step):
        self.h_fn = h_fn
        self.step = step

    def __call__(self, x):
        return self.h_fn(x) - self.h_fn(self.step(x))


def coboundary_observable(driver, h: Observable) -> Observable:
    """g = h - h o T, the telescoping observable with degenerate limit."""
    return Observable(dim_out=h.dim_out, eta=h.eta,
                      fn=_CoboundaryFn(h.fn, driver.step),
                      name=(h.name + "-coboundary") if h.name else "coboundary")


@dataclass(eq=False)
class CoboundaryResult:
    ns: list
    var_times_n: list
    pi_hats: list
    var_slope: float
    pi_fit: Optional[RateFit]
    d_norm: float


def coboundary_chunk(driver, g: Observable, n_grid, seed, start, stop):
    return birkhoff_checkpoint_chunk(driver, g, n_grid, seed, start, stop)


def coboundary_degenerate_experiment(driver, h: Observable, n_grid, ensemble: int,
                                     seed, lag_cap: int = 40,
                                     mc_samples: int = 200_000,
                                     mapper=None) -> CoboundaryResult:
    """Degeneracy checks for g = h - h o T.

    The sums telescope, so n Var(S_n/sqrt(n)) stays bounded (no growth
    trend) and the law of S_n/sqrt(n) collapses onto the point mass at 0;
    the distance to delta_0 is measured exactly through the unique
    coupling.
    """
    g = coboundary_observable(driver, h)
    n_grid = sorted(int(n) for n in n_grid)
    d_est = asymptotic_covariance(driver, g, lag_cap, mc_samples, seed,
                                  check_centered=False)
    sums = _chunked(ensemble,
                    partial(coboundary_chunk, driver, g, n_grid, seed),
                    mapper)
    var_times_n, pi_hats = [], []
    for i, n in enumerate(n_grid):
        block = sums[i]                       # S_n / sqrt(n)
        centered = block - block.mean(axis=0)
        var_times_n.append(float(n * (centered ** 2).mean(axis=0).max()))
        dists = np.abs(block).max(axis=-1)
        pi_hats.append(ky_fan_weighted(dists, np.full(block.shape[0], 1.0 / block.shape[0])))
    var_slope, _, _, _ = fit_line(np.asarray(n_grid, dtype=float), np.asarray(var_times_n))
    pi_fit = None
    if all(p > 0 for p in pi_hats):
        pi_fit = fit_loglog(n_grid, pi_hats)
    return CoboundaryResult(n_grid, var_times_n, pi_hats, var_slope, pi_fit,
                            float(np.abs(d_est.cov.entries).max()))


def char_discrepancy(samples: FiniteMeasure, sigma: CovMatrix, t) -> complex:
    """Empirical characteristic function minus the Gaussian one at t."""
    t = np.asarray(t, dtype=float).ravel()
    phase = samples.atoms @ t
    w = samples.weights
    total = np.sum(w)
    emp_re = np.sum(w * np.cos(phase)) / total
    emp_im = np.sum(w * np.sin(phase)) / total
    gauss = math.exp(-0.5 * float(t @ sigma.entries @ t))
    return complex(emp_re - gauss, emp_im)


def _gaussian_char_derivatives(order, t_grid, sigma):
    """Derivative arrays of exp(-<t, St>/2) for every ordered tuple up to
    `order`; returns dict tuple -> values on the grid."""
    st = t_grid @ sigma.T                    # (G, d)
    phi = np.exp(-0.5 * np.einsum("gd,gd->g", t_grid, st))
    out = {(): phi}
    d = sigma.shape[0]
    if order >= 1:
        for j in range(d):
            out[(j,)] = -st[:, j] * phi
    if order >= 2:
        for j in range(d):
            for k in range(d):
                out[(j, k)] = (-sigma[j, k] + st[:, j] * st[:, k]) * phi
    if order >= 3:
        for j in range(d):
            for k in range(d):
                for l in range(d):
                    poly = (sigma[j, k] * st[:, l] + sigma[j, l] * st[:, k]
                            + sigma[k, l] * st[:, j] - st[:, j] * st[:, k] * st[:, l])
                    out[(j, k, l)] = poly * phi
    if order >= 4:
        raise NotImplementedError("derivative order above 3 not implemented (d <= 5 covered)")
    return out


def yurinskii_integral(samples: FiniteMeasure, sigma: CovMatrix, U: float,
                       derivative_order_cap: Optional[int] = None,
                       grid_per_axis: int = 16) -> float:
    """Characteristic-function discrepancy integral (diagnostic only).

    Tensor-grid quadrature over |t|_inf < U of the squared derivatives of
    the difference between the empirical and Gaussian characteristic
    functions, summed over all ordered derivative tuples up to
    floor(d/2)+1, then square rooted.  The multiplicative constants of the
    smoothing inequality are non-constructive, so only comparisons across
    sample sizes are meaningful.
    """
    if U <= 0:
        raise ValueError("U must be positive")
    if grid_per_axis < 8:
        raise ValueError("grid_per_axis must be at least 8")
    d = samples.dim
    cap = derivative_order_cap if derivative_order_cap is not None else d // 2 + 1
    axis = -U + (np.arange(grid_per_axis) + 0.5) * (2.0 * U / grid_per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    t_grid = np.stack([m.ravel() for m in mesh], axis=-1)
    cell = (2.0 * U / grid_per_axis) ** d
    gauss = _gaussian_char_derivatives(cap, t_grid, sigma.entries)
    atoms, w = samples.atoms, samples.weights
    total = np.zeros(t_grid.shape[0])
    tuples = [()]
    for k in range(1, cap + 1):
        tuples += [tuple(idx) for idx in np.ndindex(*([d] * k))]
    chunk = 64
    for g0 in range(0, t_grid.shape[0], chunk):
        tg = t_grid[g0:g0 + chunk]
        E = np.exp(1j * atoms @ tg.T)        # (n, Gc)
        for J in tuples:
            mom = w.copy()
            for j in J:
                mom = mom * atoms[:, j]
            emp = (1j ** len(J)) * (mom @ E)
            diff = emp - gauss[J][g0:g0 + chunk]
            total[g0:g0 + chunk] += np.abs(diff) ** 2
    return float(np.sqrt(np.sum(total) * cell))
