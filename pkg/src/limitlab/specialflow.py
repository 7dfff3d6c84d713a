"""Reduction of flow-driven averaging to a map-driven problem.

A suspension flow moves up under a roof function tau over a base map; a
flow-driven field f(x, (omega, s)) reduces to the map-driven field
F(x, omega) = integral of f over one roof, with flow average
fbar(x) = E[F(x, .)] / E[tau].  The comparison process driven by
G(x, omega) = tau(omega) fbar(x) is the averaged flow time-changed by the
accumulated roofs, which is how it is evaluated here (exactly).  The gap
experiment compares the flow error at time t against the map-driven error
difference read off after n(t/eps) roof crossings; it shrinks linearly in
eps.
"""

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from . import rng as _rng
from .averaging import (AveragedField, PerturbedSystem, integrate_averaged,
                        prepare_grid, run_ensemble)
from .clt import _torus_grid
from .dynamics import SpecialFlowSystem
from .stats import fit_loglog

__all__ = [
    "FlowField",
    "SpecialFlowReduction",
    "special_flow_reduce",
    "remark_gap_experiment",
]

def _simpson_weights(n_nodes):
    w = np.ones(n_nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * (n_nodes - 1))


_SIMPSON17 = _simpson_weights(17)
_SNODES = np.linspace(0.0, 1.0, _SIMPSON17.size)


@dataclass(eq=False)
class FlowField:
    """f(x, omega, s): broadcasts x (..., d) against omega (..., dOmega)
    and the flow height s (...,); continuous in s below the roof."""

    fn: Callable
    dim: int
    omega_dim: int
    lipschitz: float
    sup_bound: float
    name: str = ""

    def __call__(self, x, omega, s):
        return self.fn(np.asarray(x, dtype=float),
                       np.asarray(omega, dtype=float),
                       np.asarray(s, dtype=float))


class _RoofField:
    """F(x, omega) by fixed-node quadrature in the scaled height u = s/tau."""

    def __init__(self, flow_fn, roof_fn):
        self.flow_fn = flow_fn
        self.roof_fn = roof_fn

    def __call__(self, x, omega):
        x = np.asarray(x, dtype=float)
        omega = np.asarray(omega, dtype=float)
        tau = self.roof_fn(omega)[..., 0]
        total = None
        for wgt, u in zip(_SIMPSON17, _SNODES):
            term = wgt * self.flow_fn(x, omega, u * tau)
            total = term if total is None else total + term
        return total * tau[..., None]


class _FlowAverage:
    """fbar(x) = E_nu[F(x, .)] / E_nu[tau] over a torus quadrature grid."""

    def __init__(self, reduced_fn, grid, tau_bar):
        self.reduced_fn = reduced_fn
        self.grid = grid
        self.tau_bar = tau_bar

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = np.empty_like(flat)
        step = max(1, int(5e5 / max(self.grid.shape[0], 1)))
        for s in range(0, flat.shape[0], step):
            block = flat[s:s + step]
            out[s:s + step] = self.reduced_fn(
                block[:, None, :], self.grid[None, :, :]).mean(axis=1) / self.tau_bar
        return out.reshape(x.shape)


class _ComparisonField:
    """G(x, omega) = tau(omega) fbar(x)."""

    def __init__(self, roof_fn, flow_average):
        self.roof_fn = roof_fn
        self.flow_average = flow_average

    def __call__(self, x, omega):
        tau = self.roof_fn(np.asarray(omega, dtype=float))[..., 0]
        return tau[..., None] * self.flow_average(np.asarray(x, dtype=float))


class _FbarAdapter:
    """Bare averaged-field adapter accepted by integrate_averaged."""

    def __init__(self, fbar):
        self._fbar = fbar

    def fbar(self, x):
        return self._fbar(x)


@dataclass(eq=False)
class SpecialFlowReduction:
    """Map-driven data equivalent to the flow-driven averaging problem."""

    flow_sys: SpecialFlowSystem
    flow_field: FlowField
    reduced: PerturbedSystem          # F(x, omega)
    tau_bar: float
    flow_average: Callable            # fbar(x)
    comparison: PerturbedSystem       # G(x, omega) = tau(omega) fbar(x)

    def auxiliary_H(self, x, omega):
        """H(x, omega) = F(x, omega) - tau(omega) fbar(x)."""
        x = np.asarray(x, dtype=float)
        omega = np.asarray(omega, dtype=float)
        tau = self.flow_sys.roof(omega)[..., 0]
        return self.reduced(x, omega) - tau[..., None] * self.flow_average(x)


def special_flow_reduce(f: FlowField, flow_sys: SpecialFlowSystem,
                        grid_per_axis: int = 64) -> SpecialFlowReduction:
    """Reduce a flow-driven field over a suspension flow to map-driven data."""
    roof_fn = flow_sys.roof.fn
    reduced_fn = _RoofField(f.fn, roof_fn)
    grid = _torus_grid(f.omega_dim, grid_per_axis)
    tau_bar = float(roof_fn(grid)[..., 0].mean())
    sup_f = f.sup_bound * flow_sys.roof_sup
    reduced = PerturbedSystem(fn=reduced_fn, dim=f.dim, omega_dim=f.omega_dim,
                              lipschitz=f.lipschitz * flow_sys.roof_sup,
                              sup_bound=sup_f, name=f"{f.name}-reduced")
    flow_average = _FlowAverage(reduced_fn, grid, tau_bar)
    comparison = PerturbedSystem(fn=_ComparisonField(roof_fn, flow_average),
                                 dim=f.dim, omega_dim=f.omega_dim,
                                 lipschitz=f.lipschitz * flow_sys.roof_sup,
                                 sup_bound=sup_f, name=f"{f.name}-comparison")
    return SpecialFlowReduction(flow_sys, f, reduced, tau_bar, flow_average,
                                comparison)


def _integrate_flow_perturbed(f: FlowField, flow_sys: SpecialFlowSystem,
                              x0, eps, t0, substeps, omegas):
    """Flow-driven trajectories dX/dt = f(X, Y_{t/eps}(omega, 0)).

    The grid follows each trajectory's roof-crossing times; within a piece
    the height advances smoothly and RK4 runs with the requested substeps.
    """
    omegas = np.atleast_2d(omegas)
    m = omegas.shape[0]
    n_max = int(math.ceil(t0 / (eps * flow_sys.roof_inf))) + 2
    orbit = flow_sys.base.orbit_batch(omegas, n_max)
    tau = flow_sys.roof_values(orbit)            # (n_max, m)
    times_out, states_out = [], []
    for i in range(m):
        cross = eps * np.concatenate([[0.0], np.cumsum(tau[:, i])])
        cross = cross[cross < t0 - 1e-15]
        pieces = np.append(cross, t0)
        x = np.asarray(x0, dtype=float).copy()
        tlist = [0.0]
        xlist = [x.copy()]
        for n in range(pieces.size - 1):
            a, b = pieces[n], pieces[n + 1]
            om = orbit[n, i]
            h = (b - a) / substeps
            t_local = a
            for _ in range(substeps):
                s0 = (t_local - cross[n]) / eps
                sm = s0 + 0.5 * h / eps
                s1 = s0 + h / eps
                k1 = f.fn(x, om, np.asarray(s0))
                k2 = f.fn(x + 0.5 * h * k1, om, np.asarray(sm))
                k3 = f.fn(x + 0.5 * h * k2, om, np.asarray(sm))
                k4 = f.fn(x + h * k3, om, np.asarray(s1))
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                t_local += h
                tlist.append(t_local)
                xlist.append(x.copy())
        times_out.append(np.asarray(tlist))
        states_out.append(np.asarray(xlist))
    return times_out, states_out, tau


def remark_gap_experiment(f: FlowField, flow_sys: SpecialFlowSystem, x0,
                          eps_grid, n_omegas, t0, seed, substeps=8,
                          grid_per_axis=64):
    """Measured reduction gap versus epsilon, with its decay fit.

    For each sampled driver state the flow-driven error X_t - W_t is
    compared with the map-driven difference x^F - x^G evaluated after
    n(t/eps) crossings; x^G is the averaged flow time-changed by the
    accumulated roofs (exact).  Returns (eps list, sup-gap list, RateFit).
    """
    red = special_flow_reduce(f, flow_sys, grid_per_axis)
    avg_f = AveragedField(red.reduced, _torus_grid(f.omega_dim, grid_per_axis))
    omegas = _rng.uniform_points(seed, _rng.INITIAL_POINTS, 0, n_omegas,
                                 f.omega_dim)
    horizon = t0 / flow_sys.roof_inf + 3.0 * flow_sys.roof_sup
    w_traj = integrate_averaged(_FbarAdapter(red.flow_average), x0, horizon,
                                horizon / 1024.0)
    w_spline = CubicSpline(w_traj.times, w_traj.states, axis=0)
    eps_list, gaps = [], []
    for eps in eps_grid:
        times, states, tau = _integrate_flow_perturbed(
            f, flow_sys, x0, eps, t0, substeps, omegas)
        n_max = tau.shape[0]
        t0_map = eps * n_max
        grid_F = prepare_grid(red.reduced, avg_f, x0, eps, t0_map, substeps,
                              need_averaged=False)
        out_F = run_ensemble(red.reduced, flow_sys.base, grid_F, x0, seed,
                             ("kinks_x",), n_omegas)
        worst = 0.0
        for i in range(n_omegas):
            csum = np.cumsum(tau[:, i])
            counts = np.searchsorted(csum, times[i] / eps, side="right")
            counts = np.minimum(counts, out_F["kinks_x"].shape[0] - 1)
            # x^G after n crossings: averaged flow at the accumulated roof time
            theta = eps * np.concatenate([[0.0], csum])[counts]
            x_g = w_spline(theta)
            e_minus_f = out_F["kinks_x"][counts, i, :] - x_g
            gap = np.abs(states[i] - w_spline(times[i]) - e_minus_f).max()
            worst = max(worst, float(gap))
        eps_list.append(float(eps))
        gaps.append(worst)
    fit = fit_loglog(eps_list, gaps, floor=1e-14)
    return eps_list, gaps, fit
