"""Declared-constant invariants of the named systems and observables."""

import numpy as np
import pytest

from limitlab import presets
from limitlab.clt import lebesgue_mean
from limitlab.dynamics import holder_ratio_estimate, torus_distance


@pytest.mark.parametrize("name", sorted(presets.SYSTEMS))
def test_system_bounds_on_samples(name):
    sys_p = presets.SYSTEMS[name]()
    gen = np.random.default_rng(hash(name) % 2 ** 32)
    x = gen.uniform(-2.5, 2.5, size=(400, sys_p.dim))
    y = gen.uniform(-2.5, 2.5, size=(400, sys_p.dim))
    om = gen.random((400, sys_p.omega_dim))
    vals = sys_p(x, om)
    assert np.abs(vals).max() <= sys_p.sup_bound
    lhs = np.abs(sys_p(x, om) - sys_p(y, om)).max(axis=-1)
    rhs = sys_p.lipschitz * np.abs(x - y).max(axis=-1)
    assert np.all(lhs <= rhs + 1e-12)


@pytest.mark.parametrize("name", sorted(presets.SYSTEMS))
def test_system_jacobian_consistent(name):
    sys_p = presets.SYSTEMS[name]()
    if sys_p.jacobian is None:
        pytest.skip("no analytic Jacobian declared")
    gen = np.random.default_rng(3)
    x = gen.normal(size=(20, sys_p.dim))
    om = gen.random((20, sys_p.omega_dim))
    jac = sys_p.jacobian(x, om)
    h = 1e-6
    for j in range(sys_p.dim):
        e = np.zeros(sys_p.dim)
        e[j] = h
        fd = (sys_p(x + e, om) - sys_p(x - e, om)) / (2 * h)
        assert np.abs(jac[..., :, j] - fd).max() < 1e-6


@pytest.mark.parametrize("name", ["default", "tent-product", "sin-x1",
                                  "tent-x1", "orbit-mix"])
def test_observable_declared_holder_constant(name):
    f = presets.OBSERVABLES[name]()
    assert f.holder_constant is not None
    est = holder_ratio_estimate(f, 5000, seed=42)
    assert est <= f.holder_constant + 1e-12


@pytest.mark.parametrize("name", sorted(presets.OBSERVABLES))
def test_observable_sup_bound(name):
    f = presets.OBSERVABLES[name]()
    if f.sup_bound is None:
        pytest.skip("no declared sup bound")
    pts = np.random.default_rng(0).random((5000, 2))
    assert np.abs(f(pts)).max() <= f.sup_bound + 1e-12


@pytest.mark.parametrize("name", sorted(presets.OBSERVABLES))
def test_observable_centered_where_declared(name):
    f = presets.OBSERVABLES[name]()
    if name in ("tent-x1",):
        pytest.skip("intentionally uncentered")
    if f.analytic_mean_zero:
        # Monte Carlo mean consistent with the analytic claim
        pts = np.random.default_rng(1).random((400_000, 2))
        vals = f(pts)
        se = vals.std(axis=0) / np.sqrt(400_000)
        assert np.all(np.abs(vals.mean(axis=0)) <= 5 * se + 1e-9)
    else:
        assert np.abs(lebesgue_mean(f, 2)).max() < 1e-10


def test_spiky_grid_mean_exact():
    # spike kinks are aligned with the default quadrature cells
    from limitlab.clt import _torus_grid
    for q in (64, 128, 256):
        grid = _torus_grid(2, q)
        vals = presets.spiky_system()(np.zeros(2), grid)
        assert np.abs(vals.mean(axis=0)).max() < 1e-12


def test_correlated_lag_structure():
    # lag covariances follow the geometric design delta = 0.4
    from limitlab.clt import _torus_grid
    grid = _torus_grid(2, 128)
    A = presets.cat_map()
    u0 = presets.correlated_system()(np.zeros(2), grid)
    x = grid.copy()
    decay = presets._MIX_DECAY
    want = [0.5 * sum(decay ** j * decay ** (j + k) for j in range(5 - k))
            / presets._MIX_STD ** 2 for k in range(5)]
    for k in range(1, 5):
        x = A.step(x)
        uk = presets.correlated_system()(np.zeros(2), x)
        got = (u0 * uk).mean(axis=0)
        assert np.allclose(got, want[k], atol=5e-3)
        assert abs((u0[:, 0] * uk[:, 1]).mean()) < 5e-3


def test_flow_field_bounds():
    f = presets.default_flow_field()
    gen = np.random.default_rng(5)
    x = gen.uniform(-2.5, 2.5, size=(200, 2))
    om = gen.random((200, 2))
    s = gen.random(200) * 1.3
    assert np.abs(f(x, om, s)).max() <= f.sup_bound
