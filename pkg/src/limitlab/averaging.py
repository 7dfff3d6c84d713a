"""Averaging method for ODEs driven by a measure-preserving map.

The perturbed equation freezes the driver on intervals of length eps and
is integrated by classical RK4 that never steps across an interval kink;
the averaged equation, the scaled fluctuation integral v, and its Gaussian
approximant y (solution of the linear equation y = v + int DFbar y) share
the same grid discipline.  Everything driven by an ensemble of initial
driver states is chunked by trajectory index so results are identical
under any worker count.
"""

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from . import rng as _rng
from .clt import CovMatrix, _torus_grid
from .metrics import FiniteMeasure, GaussianSpec, gaussian_sample, prokhorov
from .stats import RateFit, fit_loglog

__all__ = [
    "PerturbedSystem",
    "AveragedField",
    "Trajectory",
    "EnsembleStat",
    "average_field",
    "integrate_perturbed",
    "integrate_averaged",
    "error_process",
    "v_process",
    "y_process",
    "gronwall_check",
    "GronwallReport",
    "sigma_F",
    "direct_sigma_ensemble",
    "averaging_rate_experiment",
    "approximant_gap",
    "sup_error_lp_scaling",
    "propagator_interpretation_gap",
]

_AVG_REFINE_TOL = 1e-9
_BLOWUP = 1e12
_RESIDUAL_TOL = 1e-6
_CHUNK = 1024


@dataclass(eq=False)
class PerturbedSystem:
    """Driving field F(x, omega) with its declared regularity constants.

    `fn` broadcasts: x of shape (..., dim) against omega of shape
    (..., omega_dim).  `jacobian` (optional) returns D_1 F with shape
    (..., dim, dim).  `fluctuation_x_independent` marks fields whose
    fluctuation does not depend on x, enabling a fast covariance path.
    """

    fn: Callable
    dim: int
    omega_dim: int
    lipschitz: float
    sup_bound: float
    jacobian: Optional[Callable] = None
    holder_eta: float = 1.0
    fluctuation_x_independent: bool = False
    name: str = ""

    def __call__(self, x, omega):
        return self.fn(np.asarray(x, dtype=float), np.asarray(omega, dtype=float))


@dataclass(eq=False)
class AveragedField:
    """Torus-quadrature average of a perturbed field, with Jacobian."""

    system: PerturbedSystem
    grid: np.ndarray
    _memo: dict = field(default_factory=dict, repr=False)

    def fbar(self, x):
        """Average over the driver marginal; x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if single:
            hit = self._memo.get(pts.tobytes())
            if hit is not None:
                return hit
        out = np.empty_like(pts)
        step = max(1, int(2e6 / max(self.grid.shape[0], 1)))
        for s in range(0, pts.shape[0], step):
            block = pts[s:s + step]
            out[s:s + step] = self.system(block[:, None, :], self.grid[None, :, :]).mean(axis=1)
        if single:
            if len(self._memo) < 65536:
                self._memo[pts.tobytes()] = out[0]
            return out[0]
        return out

    def fluctuation(self, x, omega):
        """F(x, omega) - Fbar(x), broadcasting x against omega."""
        return self.system(x, omega) - self.fbar(x)

    def jacobian(self, x):
        """D Fbar, analytic when the system declares a Jacobian, else
        central differences with step 1e-5 max(1, |x|)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        d = self.system.dim
        out = np.empty((pts.shape[0], d, d))
        if self.system.jacobian is not None:
            step = max(1, int(2e6 / max(self.grid.shape[0], 1)))
            for s in range(0, pts.shape[0], step):
                block = pts[s:s + step]
                out[s:s + step] = self.system.jacobian(
                    block[:, None, :], self.grid[None, :, :]).mean(axis=1)
        else:
            for j in range(d):
                h = 1e-5 * np.maximum(1.0, np.abs(pts[:, j]))
                e = np.zeros_like(pts)
                e[:, j] = h
                out[:, :, j] = (self.fbar(pts + e) - self.fbar(pts - e)) / (2.0 * h[:, None])
        return out[0] if single else out


def average_field(sys: PerturbedSystem, grid_per_axis: int = 64) -> AveragedField:
    """Averaged field by midpoint tensor quadrature over the torus."""
    if grid_per_axis < 4:
        raise ValueError("need at least 4 quadrature points per axis")
    return AveragedField(sys, _torus_grid(sys.omega_dim, grid_per_axis))


@dataclass(eq=False)
class Trajectory:
    """Time grid on [0, T0] with states; grid contains every driver kink."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times[0] != 0.0:
            raise ValueError("trajectory must start at time 0")
        if self.times.size != self.states.shape[0]:
            raise ValueError("times and states must align")

    def final(self):
        return self.states[-1]


@dataclass(eq=False)
class EnsembleStat:
    """Per-epsilon L^p summaries of per-trajectory suprema."""

    epsilon: float
    samples: int
    lp_values: dict
    seed: int


# ---------------------------------------------------------------------------
# grid machinery shared by every trajectory of one (x0, eps, T0) setup


@dataclass(eq=False)
class GridData:
    eps: float
    t0: float
    substeps: int
    h_per_interval: np.ndarray     # (K,)
    times: np.ndarray              # (G,) fine nodes, kinks included
    w_fine: np.ndarray             # (G, d) averaged states
    w_half: np.ndarray             # (G-1, d)
    fbar_fine: np.ndarray
    fbar_half: np.ndarray
    jac_fine: Optional[np.ndarray] = None
    jac_half: Optional[np.ndarray] = None

    @property
    def n_intervals(self):
        return self.h_per_interval.size


def _interval_lengths(eps, t0):
    n_full = int(math.floor(t0 / eps + 1e-12))
    rem = t0 - n_full * eps
    if rem <= 1e-12 * max(1.0, t0):
        rem = 0.0
    lens = [eps] * n_full + ([rem] if rem > 0.0 else [])
    if not lens:
        lens = [t0]
    return np.asarray(lens)


def _averaged_on_grid(avg, x0, nodes):
    """RK4 from node to node of an explicit time grid."""
    w = np.asarray(x0, dtype=float).copy()
    out = np.empty((nodes.size, w.size))
    out[0] = w
    for g in range(nodes.size - 1):
        h = nodes[g + 1] - nodes[g]
        k1 = avg.fbar(w)
        k2 = avg.fbar(w + 0.5 * h * k1)
        k3 = avg.fbar(w + 0.5 * h * k2)
        k4 = avg.fbar(w + h * k3)
        w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.abs(w).max() > _BLOWUP:
            raise RuntimeError("averaged flow blew up")
        out[g + 1] = w
    return out


def prepare_grid(sys: PerturbedSystem, avg: AveragedField, x0, eps, t0,
                 substeps, need_jacobian=False, need_averaged=True) -> GridData:
    """Averaged trajectory plus field/Jacobian values on the kink grid.

    With need_averaged=False the averaged-state arrays are left at zero
    (only kink bookkeeping is wanted, e.g. raw perturbed trajectories)."""
    if eps <= 0 or t0 <= 0:
        raise ValueError("need eps > 0 and T0 > 0")
    if eps >= t0 and substeps < 4:
        raise ValueError("eps >= T0 requires at least 4 substeps")
    if substeps % 2 or substeps < 2:
        raise ValueError("substeps must be even and >= 2")
    lens = _interval_lengths(eps, t0)
    h = lens / substeps
    times = np.empty(lens.size * substeps + 1)
    times[0] = 0.0
    pos = 1
    t_acc = 0.0
    for k in range(lens.size):
        for j in range(substeps):
            times[pos] = t_acc + (j + 1) * h[k]
            pos += 1
        t_acc += lens[k]
    times[-1] = t0                      # guard against accumulated rounding
    d = sys.dim
    if not need_averaged:
        zeros_f = np.zeros((times.size, d))
        zeros_h = np.zeros((times.size - 1, d))
        return GridData(eps=float(eps), t0=float(t0), substeps=int(substeps),
                        h_per_interval=h, times=times,
                        w_fine=zeros_f, w_half=zeros_h,
                        fbar_fine=zeros_f, fbar_half=zeros_h)
    doubled = np.empty(2 * times.size - 1)
    doubled[0::2] = times
    doubled[1::2] = 0.5 * (times[:-1] + times[1:])
    w_doubled = _averaged_on_grid(avg, x0, doubled)
    fb_doubled = avg.fbar(w_doubled)
    jac_f = jac_h = None
    if need_jacobian:
        jac_doubled = avg.jacobian(w_doubled)
        jac_f, jac_h = jac_doubled[0::2], jac_doubled[1::2]
    return GridData(eps=float(eps), t0=float(t0), substeps=int(substeps),
                    h_per_interval=h, times=times,
                    w_fine=w_doubled[0::2], w_half=w_doubled[1::2],
                    fbar_fine=fb_doubled[0::2], fbar_half=fb_doubled[1::2],
                    jac_fine=jac_f, jac_half=jac_h)


def ensemble_chunk(sys: PerturbedSystem, driver, grid: GridData, x0, seed,
                   want, start, stop, omegas=None):
    """Integrate trajectories for driver-state indices [start, stop).

    `want` is an iterable of output names among: sup_e, final_e, sup_v,
    final_v, final_y, sup_gap, final_gap, residual_max, full_x, full_y,
    full_v, kinks_x.  Initial driver states come from per-index streams
    (so results do not depend on the chunking) unless given explicitly.
    """
    want = frozenset(want)
    if omegas is None:
        omegas = _rng.uniform_points(seed, _rng.INITIAL_POINTS, start, stop, driver.dim)
    m = stop - start
    d = sys.dim
    K = grid.n_intervals
    S = grid.substeps
    orbit = driver.orbit_batch(omegas, K)
    eps = grid.eps
    sq = math.sqrt(eps)
    need_x = bool(want & {"sup_e", "final_e", "sup_gap", "final_gap", "full_x", "kinks_x"})
    need_v = bool(want & {"sup_v", "final_v", "residual_max", "full_v"})
    need_y = bool(want & {"final_y", "sup_gap", "final_gap", "residual_max", "full_y"})
    track_resid = "residual_max" in want
    if need_y and grid.jac_fine is None:
        raise ValueError("grid lacks Jacobian data needed for the y process")
    x = np.tile(np.asarray(x0, dtype=float), (m, 1)) if need_x else None
    y = np.zeros((m, d)) if need_y else None
    v = np.zeros((m, d)) if (need_v or need_y) else None
    sup_e = np.zeros(m)
    sup_v = np.zeros(m)
    sup_gap = np.zeros(m)
    resid = np.zeros(m)
    run_int = np.zeros((m, d))
    G = grid.times.size
    full_x = np.zeros((G, m, d)) if "full_x" in want else None
    full_y = np.zeros((G, m, d)) if "full_y" in want else None
    full_v = np.zeros((G, m, d)) if "full_v" in want else None
    kinks_x = np.empty((K + 1, m, d)) if "kinks_x" in want else None
    if full_x is not None:
        full_x[0] = x
    if kinks_x is not None:
        kinks_x[0] = x
    for k in range(K):
        om = orbit[k]
        hk = grid.h_per_interval[k]
        g0 = k * S
        ft = None
        if need_v or need_y:
            nodes = np.empty((2 * S + 1, d))
            nodes[0::2] = grid.w_fine[g0:g0 + S + 1]
            nodes[1::2] = grid.w_half[g0:g0 + S]
            fb = np.empty_like(nodes)
            fb[0::2] = grid.fbar_fine[g0:g0 + S + 1]
            fb[1::2] = grid.fbar_half[g0:g0 + S]
            ft = (sys(nodes[:, None, :], om[None, :, :]) - fb[:, None, :]) / sq
        ys = [y] if track_resid else None
        vs = [v] if track_resid else None
        for j in range(S):
            gf = g0 + j + 1          # node reached after this substep
            if need_x:
                k1 = sys(x, om)
                k2 = sys(x + 0.5 * hk * k1, om)
                k3 = sys(x + 0.5 * hk * k2, om)
                k4 = sys(x + hk * k3, om)
                x = x + (hk / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if need_y:
                j0 = grid.jac_fine[gf - 1]
                jm = grid.jac_half[gf - 1]
                j1 = grid.jac_fine[gf]
                f0, fm, f1 = ft[2 * j], ft[2 * j + 1], ft[2 * j + 2]
                k1 = y @ j0.T + f0
                k2 = (y + 0.5 * hk * k1) @ jm.T + fm
                k3 = (y + 0.5 * hk * k2) @ jm.T + fm
                k4 = (y + hk * k3) @ j1.T + f1
                y = y + (hk / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if v is not None:
                v = v + (hk / 6.0) * (ft[2 * j] + 4.0 * ft[2 * j + 1] + ft[2 * j + 2])
            if "sup_e" in want:
                np.maximum(sup_e, np.abs(x - grid.w_fine[gf]).max(axis=-1), out=sup_e)
            if full_x is not None:
                full_x[gf] = x
            if v is not None:
                np.maximum(sup_v, sq * np.abs(v).max(axis=-1), out=sup_v)
                if full_v is not None:
                    full_v[gf] = v
            if need_y:
                if "sup_gap" in want:
                    gap = np.abs((x - grid.w_fine[gf]) / sq - y).max(axis=-1)
                    np.maximum(sup_gap, gap, out=sup_gap)
                if full_y is not None:
                    full_y[gf] = y
            if track_resid:
                ys.append(y)
                vs.append(v)
        if track_resid:
            # composite Simpson of DFbar(w) y over pairs of fine steps,
            # restarted at kinks; residual of y = v + int DFbar y
            qs = [ys[j] @ grid.jac_fine[g0 + j].T for j in range(S + 1)]
            for j in range(0, S, 2):
                run_int = run_int + (hk / 3.0) * (qs[j] + 4.0 * qs[j + 1] + qs[j + 2])
                gap = np.abs(ys[j + 2] - vs[j + 2] - run_int).max(axis=-1)
                np.maximum(resid, gap, out=resid)
        if kinks_x is not None:
            kinks_x[k + 1] = x
    out = {}
    if "sup_e" in want:
        out["sup_e"] = sup_e
    if "final_e" in want:
        out["final_e"] = x - grid.w_fine[-1]
    if "sup_v" in want:
        out["sup_v"] = sup_v
    if "final_v" in want:
        out["final_v"] = v
    if "final_y" in want:
        out["final_y"] = y
    if "sup_gap" in want:
        out["sup_gap"] = sup_gap
    if "final_gap" in want:
        out["final_gap"] = (x - grid.w_fine[-1]) / sq - y
    if "full_x" in want:
        out["full_x"] = full_x
    if "full_y" in want:
        out["full_y"] = full_y
    if "full_v" in want:
        out["full_v"] = full_v
    if "kinks_x" in want:
        out["kinks_x"] = kinks_x
    if "residual_max" in want:
        out["residual_max"] = resid
    return out


def run_ensemble(sys, driver, grid, x0, seed, want, ensemble, mapper=None):
    """Chunked ensemble integration with order-preserving reduction."""
    fn = partial(ensemble_chunk, sys, driver, grid, x0, seed, tuple(sorted(want)))
    bounds = [(s, min(s + _CHUNK, ensemble)) for s in range(0, ensemble, _CHUNK)]
    if mapper is None:
        parts = [fn(s, e) for s, e in bounds]
    else:
        parts = mapper(fn, bounds)
    keys = parts[0].keys()
    return {k: np.concatenate([p[k] for p in parts], axis=-2)
            if parts[0][k].ndim > 1 else np.concatenate([p[k] for p in parts])
            for k in keys}


# ---------------------------------------------------------------------------
# single-trajectory operations


def _chunk_for_single(sys, driver, grid, x0, omega, want):
    omegas = np.asarray(omega, dtype=float)[None, :]
    return ensemble_chunk(sys, driver, grid, x0, 0, want, 0, 1, omegas=omegas)


def integrate_perturbed(sys: PerturbedSystem, driver, x0, eps, t0,
                        substeps, omega, avg: Optional[AveragedField] = None) -> Trajectory:
    """Perturbed trajectory with the driver frozen on [k eps, (k+1) eps).

    The grid contains every kink; within an interval classical RK4 runs
    with the requested substeps; the state carries over continuously.
    """
    avg = avg if avg is not None else average_field(sys)
    grid = prepare_grid(sys, avg, x0, eps, t0, substeps)
    out = _chunk_for_single(sys, driver, grid, x0, omega, ("full_x",))
    return Trajectory(grid.times, out["full_x"][:, 0, :])


def integrate_averaged(avg: AveragedField, x0, t0, step) -> Trajectory:
    """RK4 on a uniform grid, refined by halving until two successive
    resolutions agree within 1e-9 at shared points."""
    if step <= 0 or t0 <= 0:
        raise ValueError("need positive step and horizon")
    n = max(2, int(math.ceil(t0 / step)))
    prev = None
    for _ in range(13):
        nodes = np.linspace(0.0, t0, n + 1)
        states = _averaged_on_grid(avg, x0, nodes)
        if prev is not None and prev.shape[0] - 1 <= (states.shape[0] - 1) // 2:
            shared = states[::2] if (states.shape[0] - 1) == 2 * (prev.shape[0] - 1) else None
            if shared is not None and np.abs(shared - prev).max() < _AVG_REFINE_TOL:
                return Trajectory(nodes, states)
        prev = states
        n *= 2
    return Trajectory(np.linspace(0.0, t0, n // 2 + 1), prev)


def error_process(perturbed: Trajectory, averaged: Trajectory) -> Trajectory:
    """Pointwise difference on the perturbed grid; the averaged trajectory
    is resampled there by cubic dense output."""
    spline = CubicSpline(averaged.times, averaged.states, axis=0)
    w = spline(perturbed.times)
    return Trajectory(perturbed.times, perturbed.states - w)


def v_process(sys, avg, driver, x0, eps, t0, substeps, omega) -> Trajectory:
    """Scaled fluctuation integral along the averaged trajectory."""
    grid = prepare_grid(sys, avg, x0, eps, t0, substeps)
    out = _chunk_for_single(sys, driver, grid, x0, omega, ("full_v",))
    return Trajectory(grid.times, out["full_v"][:, 0, :])


def y_process(sys, avg, driver, x0, eps, t0, substeps, omega,
              return_residual=False):
    """Gaussian approximant: solution of dy/dt = DFbar(w_t) y + dv/dt.

    Solved with the time-ordered fundamental-matrix discipline (the RK4
    solve of the linear equation); the defining integral-equation residual
    is evaluated on the grid and must stay below 1e-6.
    """
    grid = prepare_grid(sys, avg, x0, eps, t0, substeps, need_jacobian=True)
    out = _chunk_for_single(sys, driver, grid, x0, omega,
                            ("full_y", "residual_max"))
    resid = float(out["residual_max"][0])
    if resid > _RESIDUAL_TOL:
        raise RuntimeError(f"y integral-equation residual {resid!r} exceeds 1e-6")
    traj = Trajectory(grid.times, out["full_y"][:, 0, :])
    return (traj, resid) if return_residual else traj


@dataclass(eq=False)
class GronwallReport:
    passed: bool
    slack_error_side: float
    slack_integral_side: float
    sup_error: float
    sup_integral: float


def gronwall_check(sys: PerturbedSystem, avg: AveragedField,
                   perturbed: Trajectory, averaged: Trajectory,
                   eps, driver, omega, t0, substeps=None) -> GronwallReport:
    """Pathwise two-sided comparison of the sup error against the sup of
    the accumulated fluctuation integral, with constants (1 + L e^{L T0})
    and (1 + L T0).  Fails when either inequality is violated by more than
    the 1e-6 integration budget."""
    e = error_process(perturbed, averaged)
    sup_e = float(np.abs(e.states).max())
    if substeps is None:
        kinks = max(1, int(round(t0 / eps)))
        substeps = max(2, (e.times.size - 1) // kinks)
        substeps += substeps % 2
    v = v_process(sys, avg, driver, np.asarray(perturbed.states[0]), eps, t0,
                  substeps, omega)
    sup_iv = float(math.sqrt(eps) * np.abs(v.states).max())
    c_hi = 1.0 + sys.lipschitz * math.exp(sys.lipschitz * t0)
    c_lo = 1.0 + sys.lipschitz * t0
    slack1 = c_hi * sup_iv - sup_e
    slack2 = c_lo * sup_e - sup_iv
    ok = slack1 >= -_RESIDUAL_TOL and slack2 >= -_RESIDUAL_TOL
    return GronwallReport(ok, slack1, slack2, sup_e, sup_iv)


# ---------------------------------------------------------------------------
# limit covariance of the scaled error


def _propagators_to_one(avg, x0, n_cells, nodes_per_cell):
    """w and the solution operators Phi(u -> 1) on the grid u = i / (S N).

    Phi solves the variational equation along the averaged flow; the
    transpose system dPsi/du = -Psi DFbar(w_u) is integrated backward from
    Psi(1) = I.
    """
    G = n_cells * nodes_per_cell
    nodes = np.arange(2 * G + 1) / (2 * G)        # doubled grid on [0, 1]
    w = _averaged_on_grid(avg, x0, nodes)
    jac = avg.jacobian(w)
    d = w.shape[1]
    psi = np.empty((G + 1, d, d))
    psi[G] = np.eye(d)
    h = 1.0 / G
    cur = np.eye(d)
    for i in range(G, 0, -1):
        j1 = jac[2 * i]
        jm = jac[2 * i - 1]
        j0 = jac[2 * i - 2]
        k1 = -cur @ j1
        k2 = -(cur + 0.5 * (-h) * k1) @ jm
        k3 = -(cur + 0.5 * (-h) * k2) @ jm
        k4 = -(cur + (-h) * k3) @ j0
        cur = cur + (-h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        psi[i - 1] = cur
    return w[0::2], psi


_SIMPSON9 = np.array([1, 4, 2, 4, 2, 4, 2, 4, 1], dtype=float) / 24.0


def _lag_series(vals, lag_cap):
    """A(g) estimator from orbit values (lag_cap+1, M, d)."""
    mvals = vals.shape[1]
    base = vals[0]
    total = base.T @ base / mvals
    for k in range(1, lag_cap + 1):
        ck = base.T @ vals[k] / mvals
        total = total + ck + ck.T
    return 0.5 * (total + total.T)


def sigma_F(sys: PerturbedSystem, avg: AveragedField, driver, x0, n_cells: int,
            lag_cap: int = 40, mc_samples: int = 200_000, seed=0) -> CovMatrix:
    """Limit covariance of the scaled error at time 1.

    Builds the propagated fluctuation kernels cell by cell (quadrature in
    the cell variable, fundamental-matrix factors to time 1), estimates
    the lag-covariance series of each kernel, and averages over cells; the
    result is symmetrized and PSD-clamped.
    """
    if n_cells < 8:
        raise ValueError("need at least 8 cells")
    S = _SIMPSON9.size - 1
    w, psi = _propagators_to_one(avg, x0, n_cells, S)
    pts = _rng.substream(seed, _rng.COVARIANCE).random((mc_samples, driver.dim))
    d = sys.dim
    total = np.zeros((d, d))
    if sys.fluctuation_x_independent:
        # the kernels factor out: A(kernel u) = kernel A(u) kernel^T, so
        # one lag series of the raw fluctuation serves every cell; the
        # sample is streamed in blocks to bound memory
        fb0 = avg.fbar(w[0])
        sums = np.zeros((lag_cap + 1, d, d))
        block = 200_000
        for s0 in range(0, mc_samples, block):
            blk = pts[s0:s0 + block]
            orbit_b = driver.orbit_batch(blk, lag_cap + 1)
            vals = (sys(w[0][None, :], orbit_b.reshape(-1, driver.dim))
                    - fb0[None, :]).reshape(lag_cap + 1, blk.shape[0], d)
            for k in range(lag_cap + 1):
                sums[k] += vals[0].T @ vals[k]
        base_series = sums[0] / mc_samples
        for k in range(1, lag_cap + 1):
            ck = sums[k] / mc_samples
            base_series = base_series + ck + ck.T
        base_series = 0.5 * (base_series + base_series.T)
        for l in range(n_cells):
            kernel = np.zeros((d, d))
            for j in range(S + 1):
                kernel += _SIMPSON9[j] * psi[l * S + j]
            total += kernel @ base_series @ kernel.T
    else:
        orbit = driver.orbit_batch(pts, lag_cap + 1)
        flat = orbit.reshape(-1, driver.dim)
        fbar_nodes = avg.fbar(w)
        for l in range(n_cells):
            vals = np.zeros((flat.shape[0], d))
            for j in range(S + 1):
                i = l * S + j
                ft = sys(w[i][None, :], flat) - fbar_nodes[i][None, :]
                vals += _SIMPSON9[j] * (ft @ psi[i].T)
            vals = vals.reshape(lag_cap + 1, mc_samples, d)
            total += _lag_series(vals, lag_cap)
    total /= n_cells
    scale = max(1.0, float(np.abs(total).max()))
    evals, vecs = np.linalg.eigh(0.5 * (total + total.T))
    if evals.min() < -1e-8 * scale:
        total = (vecs * np.maximum(evals, 0.0)) @ vecs.T
    return CovMatrix(0.5 * (total + total.T)).clamped()


def direct_sigma_ensemble(sys, avg, driver, x0, n_cells, m, seed,
                          substeps=8, mapper=None):
    """Empirical covariance of the time-1 approximant at eps = 1/N, with
    entrywise Monte Carlo standard errors."""
    grid = prepare_grid(sys, avg, x0, 1.0 / n_cells, 1.0, substeps,
                        need_jacobian=True)
    out = run_ensemble(sys, driver, grid, x0, seed, ("final_y",), m, mapper)
    ys = out["final_y"]
    prods = ys[:, :, None] * ys[:, None, :]
    cov = prods.mean(axis=0)
    se = prods.std(axis=0) / math.sqrt(m)
    return cov, se


# ---------------------------------------------------------------------------
# rate experiments


@dataclass(eq=False)
class AveragingRateResult:
    fit: Optional[RateFit]
    eps_grid: list
    pi_hats: list
    sigma: CovMatrix
    degenerate: bool


def _validate_eps_grid(eps_grid):
    eps_grid = [float(e) for e in eps_grid]
    if len(eps_grid) < 3 or any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps_grid must be strictly decreasing with >= 3 entries")
    return eps_grid


def averaging_rate_experiment(sys, driver, x0, s, eps_grid, ensemble,
                              gaussian_m, seed, tol=2e-3, substeps=16,
                              sigma_cells=64, mc_samples=200_000,
                              avg=None, mapper=None) -> AveragingRateResult:
    """Distance of the scaled time-s error law to its Gaussian limit.

    For s != 1 the field is rescaled (F -> s F, eps -> eps / s), which is
    the exact reduction to the time-1 experiment.  The Prokhorov distance
    to an m-sample discretization of N(0, Sigma) is regressed on eps; the
    expected slope is +1/2.
    """
    eps_grid = _validate_eps_grid(eps_grid)
    if s <= 0:
        raise ValueError("time s must be positive")
    if s != 1.0:
        sys = rescale_system(sys, s)
        eps_grid = [e / s for e in eps_grid]
    avg = avg if avg is not None else average_field(sys)
    sigma = sigma_F(sys, avg, driver, x0, sigma_cells, mc_samples=mc_samples, seed=seed)
    degenerate = sigma.min_eigenvalue() <= 1e-3
    ref = gaussian_sample(GaussianSpec(np.zeros(sys.dim), sigma.entries),
                          gaussian_m, seed)
    pi_hats = []
    for eps in eps_grid:
        grid = prepare_grid(sys, avg, x0, eps, 1.0, substeps)
        out = run_ensemble(sys, driver, grid, x0, seed, ("final_e",), ensemble, mapper)
        samples = out["final_e"] / math.sqrt(eps)
        pi_hats.append(prokhorov(FiniteMeasure.from_samples(samples), ref, tol))
    floor = 1.0 / (2.0 * gaussian_m)
    fit = fit_loglog(eps_grid, pi_hats, floor=floor)
    return AveragingRateResult(fit, eps_grid, pi_hats, sigma, degenerate)


@dataclass(eq=False)
class GapScalingResult:
    eps_grid: list
    stats: list                   # EnsembleStat per eps
    fits: dict                    # p -> RateFit (values vs eps)
    lognorm_fits: dict            # p -> RateFit of value/|ln eps|


def _lp_table(values_per_eps, eps_grid, p_list, seed, sign=1.0):
    stats, table = [], {p: [] for p in p_list}
    for eps, vals in zip(eps_grid, values_per_eps):
        lp = {}
        for p in p_list:
            lp[p] = float(np.mean(np.abs(vals) ** p) ** (1.0 / p))
            table[p].append(lp[p])
        stats.append(EnsembleStat(eps, len(vals), lp, seed))
    return stats, table


def approximant_gap(sys, driver, x0, eps_grid, t0, ensemble, p_list, seed,
                    substeps=16, avg=None, mapper=None):
    """L^p size of e/sqrt(eps) - y across an ensemble, per epsilon.

    Returns scaling summaries for both the sup-in-time gap and the
    final-time gap, with fitted decay exponents (slope of value vs eps in
    log-log; the expected exponent is 1/2 when the state derivative of the
    field is Hölder in the driver)."""
    eps_grid = _validate_eps_grid(eps_grid)
    if ensemble < 100:
        raise ValueError("need an ensemble of at least 100")
    avg = avg if avg is not None else average_field(sys)
    sup_vals, fin_vals = [], []
    for eps in eps_grid:
        grid = prepare_grid(sys, avg, x0, eps, t0, substeps, need_jacobian=True)
        out = run_ensemble(sys, driver, grid, x0, seed,
                           ("sup_gap", "final_gap", "residual_max"), ensemble, mapper)
        worst = float(out["residual_max"].max())
        if worst > _RESIDUAL_TOL:
            raise RuntimeError(f"y residual {worst!r} above 1e-6")
        sup_vals.append(out["sup_gap"])
        fin_vals.append(np.abs(out["final_gap"]).max(axis=-1))
    res = {}
    for tag, vals in (("sup", sup_vals), ("final", fin_vals)):
        stats, table = _lp_table(vals, eps_grid, p_list, seed)
        fits = {p: fit_loglog(eps_grid, table[p], floor=1e-14) for p in p_list}
        res[tag] = GapScalingResult(eps_grid, stats, fits, {})
    return res


def sup_error_lp_scaling(sys, driver, x0, eps_grid, ensemble, p_list, t0,
                         seed, substeps=16, avg=None, mapper=None) -> GapScalingResult:
    """L^p norms of sup_t |e| per epsilon with raw and log-normalized
    decay fits (the latter divides by |ln eps| before fitting)."""
    eps_grid = _validate_eps_grid(eps_grid)
    avg = avg if avg is not None else average_field(sys)
    values = []
    for eps in eps_grid:
        grid = prepare_grid(sys, avg, x0, eps, t0, substeps)
        out = run_ensemble(sys, driver, grid, x0, seed, ("sup_e",), ensemble, mapper)
        values.append(out["sup_e"])
    stats, table = _lp_table(values, eps_grid, p_list, seed)
    fits, lfits = {}, {}
    for p in p_list:
        fits[p] = fit_loglog(eps_grid, table[p], floor=1e-14)
        normed = [val / abs(math.log(e)) for val, e in zip(table[p], eps_grid)]
        lfits[p] = fit_loglog(eps_grid, normed, floor=1e-14)
    return GapScalingResult(eps_grid, stats, fits, lfits)


def gronwall_ensemble(sys, driver, x0, eps, t0, ensemble, seed,
                      substeps=16, avg=None, mapper=None):
    """Both pathwise inequality slacks for an ensemble at one epsilon."""
    avg = avg if avg is not None else average_field(sys)
    grid = prepare_grid(sys, avg, x0, eps, t0, substeps)
    out = run_ensemble(sys, driver, grid, x0, seed, ("sup_e", "sup_v"),
                       ensemble, mapper)
    c_hi = 1.0 + sys.lipschitz * math.exp(sys.lipschitz * t0)
    c_lo = 1.0 + sys.lipschitz * t0
    slack1 = c_hi * out["sup_v"] - out["sup_e"]
    slack2 = c_lo * out["sup_e"] - out["sup_v"]
    return slack1, slack2


def rescale_system(sys: PerturbedSystem, s: float) -> PerturbedSystem:
    """s F with the constants rescaled accordingly."""
    return PerturbedSystem(fn=_ScaledField(sys.fn, s), dim=sys.dim,
                           omega_dim=sys.omega_dim,
                           lipschitz=s * sys.lipschitz,
                           sup_bound=s * sys.sup_bound,
                           jacobian=None if sys.jacobian is None
                           else _ScaledField(sys.jacobian, s),
                           holder_eta=sys.holder_eta,
                           fluctuation_x_independent=sys.fluctuation_x_independent,
                           name=f"{sys.name}-x{s}")


class _ScaledField:
    def __init__(self, fn, s):
        self.fn = fn
        self.s = float(s)

    def __call__(self, x, omega):
        return self.s * self.fn(x, omega)


def propagator_interpretation_gap(avg: AveragedField, x0, t0=1.0, n_steps=256):
    """Sup difference between the time-ordered fundamental matrix and the
    plain matrix exponential of the integrated Jacobian along the averaged
    flow.  Zero for commuting Jacobian families; a recorded diagnostic for
    the ambiguous exponential notation otherwise."""
    nodes = np.linspace(0.0, t0, 2 * n_steps + 1)
    w = _averaged_on_grid(avg, x0, nodes)
    jac = avg.jacobian(w)
    d = w.shape[1]
    fund = np.eye(d)
    acc = np.zeros((d, d))
    worst = 0.0
    h = t0 / n_steps
    for i in range(n_steps):
        j0, jm, j1 = jac[2 * i], jac[2 * i + 1], jac[2 * i + 2]
        k1 = j0 @ fund
        k2 = jm @ (fund + 0.5 * h * k1)
        k3 = jm @ (fund + 0.5 * h * k2)
        k4 = j1 @ (fund + h * k3)
        fund = fund + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        acc = acc + (h / 6.0) * (j0 + 4.0 * jm + j1)
        worst = max(worst, float(np.abs(fund - expm(acc)).max()))
    return worst
