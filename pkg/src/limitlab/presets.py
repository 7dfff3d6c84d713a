"""Named drivers, observables, perturbed systems and flow fields.

Everything here is built from module-level functions so instances pickle
cleanly across worker processes.  These are the systems the experiment
runner exposes by name.
"""

import math

import numpy as np
from scipy.special import ndtri

from .averaging import PerturbedSystem
from .dynamics import IIDTorusDriver, Observable, SpecialFlowSystem, ToralAutomorphism
from .specialflow import FlowField

TWO_PI = 2.0 * math.pi

CAT_MATRIX = np.array([[2, 1], [1, 1]])


def cat_map():
    """Arnold's cat map, the canonical hyperbolic automorphism of T^2."""
    return ToralAutomorphism(CAT_MATRIX)


def iid_driver(dim=2):
    return IIDTorusDriver(dim=dim)


# --- observables -----------------------------------------------------------


def _default_obs_fn(x):
    return np.stack([np.cos(TWO_PI * x[..., 0]),
                     np.sin(TWO_PI * (x[..., 0] + x[..., 1]))], axis=-1)


def default_observable():
    """(cos 2 pi x1, sin 2 pi (x1+x2)): centered, Hölder constant 4 pi,
    nondegenerate limit covariance I/2 for the cat map."""
    return Observable(dim_out=2, eta=1.0, fn=_default_obs_fn,
                      holder_constant=4.0 * math.pi, sup_bound=1.0,
                      name="default")


def _tent(u):
    return np.minimum(u, 1.0 - u)


def _tent_product_fn(x):
    return (_tent(x[..., 0]) * _tent(x[..., 1]) - 0.0625)[..., None]


def tent_product_observable():
    """tent(x1) tent(x2) - 1/16: centered, Lipschitz constant 1, full
    two-dimensional Fourier support (genuine geometric decorrelation)."""
    return Observable(dim_out=1, eta=1.0, fn=_tent_product_fn,
                      holder_constant=1.0, sup_bound=0.1875,
                      name="tent-product")


def _sin_x1_fn(x):
    return np.sin(TWO_PI * x[..., 0])[..., None]


def sin_x1_observable():
    return Observable(dim_out=1, eta=1.0, fn=_sin_x1_fn,
                      holder_constant=TWO_PI, sup_bound=1.0, name="sin-x1")


def _tent_x1_fn(x):
    return _tent(x[..., 0])[..., None]


def tent_x1_observable():
    """tent(x1): quotient-metric Lipschitz constant exactly 1."""
    return Observable(dim_out=1, eta=1.0, fn=_tent_x1_fn,
                      holder_constant=1.0, sup_bound=0.5, name="tent-x1")


def _zero2_fn(x):
    return np.zeros(x.shape[:-1] + (2,))


def zero_observable():
    return Observable(dim_out=2, eta=1.0, fn=_zero2_fn, holder_constant=0.0,
                      sup_bound=0.0, name="zero")


def _rademacher_fn(x):
    return np.where(x[..., :2] >= 0.5, 1.0, -1.0)


def rademacher_observable():
    """Independent +-1 coordinates (identity covariance): the lattice
    witness of the optimal 1/sqrt(n) i.i.d. convergence rate."""
    return Observable(dim_out=2, eta=1.0, fn=_rademacher_fn, sup_bound=1.0,
                      name="rademacher", analytic_mean_zero=True)


_BERNOULLI_P = 0.05
_BERN_HI = (1.0 - _BERNOULLI_P) / math.sqrt(_BERNOULLI_P * (1.0 - _BERNOULLI_P))
_BERN_LO = -math.sqrt(_BERNOULLI_P / (1.0 - _BERNOULLI_P))


def _bernoulli_fn(x):
    return np.where(x[..., :2] < _BERNOULLI_P, _BERN_HI, _BERN_LO)


def bernoulli_observable():
    """Standardized skewed Bernoulli coordinates (p = 0.05, identity
    covariance): a lattice law with large skewness, so the 1/sqrt(n)
    convergence of its normalized sums stays visible above the empirical
    discretization floor of the measured distance."""
    return Observable(dim_out=2, eta=1.0, fn=_bernoulli_fn,
                      sup_bound=_BERN_HI, name="bernoulli",
                      analytic_mean_zero=True)


def _uniform_sym_fn(x):
    return math.sqrt(3.0) * (2.0 * x[..., :2] - 1.0)


def uniform_summand_observable():
    """Symmetric uniform coordinates scaled to unit variance."""
    return Observable(dim_out=2, eta=1.0, fn=_uniform_sym_fn,
                      sup_bound=math.sqrt(3.0), name="uniform")


def _gaussian_summand_fn(x):
    clipped = np.clip(x[..., :2], 1e-12, 1.0 - 1e-12)
    return ndtri(clipped)


def gaussian_summand_observable():
    """Exactly standard normal coordinates (via the normal quantile).
    Makes the normalized sums exactly Gaussian at every n, so the
    measured distance is flat in n: kept for demonstrating that effect."""
    return Observable(dim_out=2, eta=1.0, fn=_gaussian_summand_fn,
                      name="gaussian", analytic_mean_zero=True)


def _orbit_mix_fn(x):
    total = 0.0
    freqs = ((1, 0), (2, 1), (5, 3), (13, 8), (34, 21))
    for k, (m1, m2) in enumerate(freqs):
        total = total + 0.45 ** k * np.cos(TWO_PI * (m1 * x[..., 0] + m2 * x[..., 1]))
    return total[..., None]


def orbit_mix_observable():
    """Sum of cosines along one frequency orbit of the cat map, with
    geometric coefficients: the lag covariances are exactly
    0.5 sum_k 0.45^k 0.45^{k+n}, a clean geometric decorrelation profile."""
    return Observable(dim_out=1, eta=1.0, fn=_orbit_mix_fn,
                      holder_constant=52.0,
                      sup_bound=2.0, name="orbit-mix", analytic_mean_zero=True)


OBSERVABLES = {
    "default": default_observable,
    "tent-product": tent_product_observable,
    "sin-x1": sin_x1_observable,
    "tent-x1": tent_x1_observable,
    "zero": zero_observable,
    "rademacher": rademacher_observable,
    "bernoulli": bernoulli_observable,
    "uniform": uniform_summand_observable,
    "gaussian": gaussian_summand_observable,
    "orbit-mix": orbit_mix_observable,
}


# --- perturbed systems -----------------------------------------------------


def _fluct(omega):
    return np.stack([np.cos(TWO_PI * omega[..., 0]),
                     np.sin(TWO_PI * (omega[..., 0] + omega[..., 1]))], axis=-1)


def _default_F(x, omega):
    return -x + _fluct(omega)


def _default_F_jac(x, omega):
    shape = np.broadcast_shapes(x.shape[:-1], omega.shape[:-1])
    return np.broadcast_to(-np.eye(2), shape + (2, 2)).copy()


def default_system():
    """-x + (cos 2 pi w1, sin 2 pi (w1+w2)): averaged field -x, bounded
    driver fluctuation independent of the state."""
    return PerturbedSystem(fn=_default_F, dim=2, omega_dim=2, lipschitz=1.0,
                           sup_bound=4.0, jacobian=_default_F_jac,
                           holder_eta=1.0, fluctuation_x_independent=True,
                           name="default")


def _coupled_F(x, omega):
    scale = 1.0 + 0.3 * np.tanh(x[..., 1:2])
    return -x + scale * _fluct(omega)


def _coupled_F_jac(x, omega):
    shape = np.broadcast_shapes(x.shape[:-1], omega.shape[:-1])
    jac = np.broadcast_to(-np.eye(2), shape + (2, 2)).copy()
    sech2 = 1.0 - np.tanh(x[..., 1]) ** 2
    u = _fluct(omega)
    jac[..., 0, 1] += 0.3 * sech2 * u[..., 0]
    jac[..., 1, 1] += 0.3 * sech2 * u[..., 1]
    return jac


def coupled_system():
    """-x + (1 + 0.3 tanh x2) (cos 2 pi w1, sin 2 pi (w1+w2)): same averaged
    field -x but with state-coupled fluctuation, so the Gaussian
    approximant differs from the scaled error at order sqrt(eps)."""
    return PerturbedSystem(fn=_coupled_F, dim=2, omega_dim=2, lipschitz=1.3,
                           sup_bound=4.4, jacobian=_coupled_F_jac,
                           holder_eta=1.0, fluctuation_x_independent=False,
                           name="coupled")


class _SpikyField:
    """-x plus a standardized tent-spike fluctuation per coordinate.

    The spike peaks at width_cells/64 with support [0, 2 width_cells/64];
    its kinks sit on the boundaries of the default 64-per-axis quadrature
    cells, so the midpoint-grid mean is exact and the averaged field
    carries no quadrature drift.
    """

    def __init__(self, width_cells=2):
        self.center = width_cells / 64.0
        self.mean = self.center
        self.std = math.sqrt(2.0 * self.center / 3.0 - self.center ** 2)

    def fluctuation(self, omega):
        def spike(u):
            return np.maximum(0.0, 1.0 - np.abs(u - self.center) / self.center)
        vals = np.stack([spike(omega[..., 0]), spike(omega[..., 1])], axis=-1)
        return (vals - self.mean) / self.std

    def __call__(self, x, omega):
        return -x + self.fluctuation(omega)


def spiky_system(width_cells=2):
    """-x plus a strongly skewed narrow-spike fluctuation.

    The spike law behaves like a Bernoulli with small success probability,
    so the Gaussian limit of the scaled error is approached at a visible
    1/sqrt(N) distance instead of hiding under the empirical-measure
    resolution of the metric."""
    field = _SpikyField(width_cells)
    peak = (1.0 - field.mean) / field.std
    return PerturbedSystem(fn=field, dim=2, omega_dim=2, lipschitz=1.0,
                           sup_bound=peak + 4.0, jacobian=_default_F_jac,
                           holder_eta=1.0, fluctuation_x_independent=True,
                           name="spiky")


# two disjoint frequency orbits of the cat map seed the two components
_MIX_FREQS_A = ((1, 0), (2, 1), (5, 3), (13, 8), (34, 21))
_MIX_FREQS_B = ((0, 1), (1, 1), (3, 2), (8, 5), (21, 13))
_MIX_DECAY = 0.4
_MIX_STD = math.sqrt(0.5 * sum(_MIX_DECAY ** (2 * k) for k in range(5)))


def _mix_component(omega, freqs):
    total = 0.0
    for k, (m1, m2) in enumerate(freqs):
        total = total + _MIX_DECAY ** k * np.cos(
            TWO_PI * (m1 * omega[..., 0] + m2 * omega[..., 1]))
    return total / _MIX_STD


def _correlated_F(x, omega):
    a = _mix_component(omega, _MIX_FREQS_A)
    b = _mix_component(omega, _MIX_FREQS_B)
    return -x + np.stack([np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)),
                          np.broadcast_to(b, np.broadcast_shapes(a.shape, b.shape))],
                         axis=-1)


def correlated_system():
    """-x plus a fluctuation with genuine geometric driver-lag correlations.

    Built from cosines along one frequency orbit of the cat map, so the
    fluctuation observed along the driver has nonzero covariances at lags
    1..4; the finite-N correction between the limit covariance and the
    direct time-1 covariance is then a real, measurable quantity."""
    return PerturbedSystem(fn=_correlated_F, dim=2, omega_dim=2, lipschitz=1.0,
                           sup_bound=7.0, jacobian=_default_F_jac,
                           holder_eta=1.0, fluctuation_x_independent=True,
                           name="correlated")


SYSTEMS = {
    "default": default_system,
    "coupled": coupled_system,
    "spiky": spiky_system,
    "correlated": correlated_system,
}


# --- suspension flow -------------------------------------------------------


class _RoofFn:
    def __init__(self, amplitude):
        self.amplitude = float(amplitude)

    def __call__(self, omega):
        return (1.0 + self.amplitude * np.cos(TWO_PI * omega[..., 0]))[..., None]


def default_roof(amplitude=0.3):
    return Observable(dim_out=1, eta=1.0, fn=_RoofFn(amplitude),
                      holder_constant=amplitude * TWO_PI,
                      sup_bound=1.0 + amplitude, name="roof")


def default_flow_system(amplitude=0.3):
    """Suspension over the cat map with roof 1 + a cos 2 pi w1."""
    if not (0.0 <= amplitude < 1.0):
        raise ValueError("roof amplitude must lie in [0, 1)")
    return SpecialFlowSystem(base=cat_map(), roof=default_roof(amplitude),
                             roof_inf=1.0 - amplitude, roof_sup=1.0 + amplitude)


def _flow_field_fn(x, omega, s):
    s = np.asarray(s, dtype=float)
    a = np.cos(TWO_PI * (omega[..., 0] + 0.3 * s))
    b = np.sin(TWO_PI * (omega[..., 0] + omega[..., 1] + 0.2 * s))
    return -x + np.stack([np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)),
                          np.broadcast_to(b, np.broadcast_shapes(a.shape, b.shape))],
                         axis=-1)


def default_flow_field():
    """-x plus a height-dependent trigonometric fluctuation."""
    return FlowField(fn=_flow_field_fn, dim=2, omega_dim=2, lipschitz=1.0,
                     sup_bound=4.0, name="flow-default")


def _flow_field_sfree_fn(x, omega, s):
    return -x + _fluct(omega)


def height_free_flow_field():
    """Flow field without height dependence: F reduces to tau times f."""
    return FlowField(fn=_flow_field_sfree_fn, dim=2, omega_dim=2,
                     lipschitz=1.0, sup_bound=4.0, name="flow-height-free")
