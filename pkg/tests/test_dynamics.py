"""Phase-space layer: maps, metric, observables, suspension flows."""

from fractions import Fraction

import numpy as np
import pytest

from limitlab import presets
from limitlab.dynamics import (FlowPoint, IIDTorusDriver, Observable,
                               SpecialFlowSystem, ToralAutomorphism,
                               flow_crossing_count, holder_ratio_estimate,
                               orbit, special_flow_evolve, toral_step,
                               torus_distance, wrap)


def exact_orbit(matrix, x0, n):
    """Independent oracle: exact rational orbit for dyadic-rational seeds."""
    x = [Fraction(v) for v in x0]
    out = []
    for _ in range(n):
        out.append([float(v) for v in x])
        x = [sum(Fraction(int(matrix[i][j])) * x[j] for j in range(len(x))) % 1
             for i in range(len(x))]
    return np.asarray(out)


class TestToralAutomorphism:
    def test_identity_rejected(self):
        with pytest.raises(ValueError):
            ToralAutomorphism([[1, 0], [0, 1]])

    def test_parabolic_rejected(self):
        with pytest.raises(ValueError):
            ToralAutomorphism([[1, 1], [0, 1]])

    def test_nonunimodular_rejected(self):
        with pytest.raises(ValueError):
            ToralAutomorphism([[2, 0], [0, 1]])

    def test_noninteger_rejected(self):
        with pytest.raises(ValueError):
            ToralAutomorphism([[2.5, 1], [1, 1]])

    def test_cat_fixed_point(self):
        A = presets.cat_map()
        assert np.allclose(toral_step(A, [0.0, 0.0]), [0.0, 0.0])

    def test_cat_step_example(self):
        A = presets.cat_map()
        assert np.allclose(toral_step(A, [0.5, 0.25]), [0.25, 0.75])

    def test_step_matches_exact_rational(self):
        A = presets.cat_map()
        x0 = [0.5, 0.25]
        got = orbit(A, x0, 8)
        want = exact_orbit(A.matrix, [Fraction(1, 2), Fraction(1, 4)], 8)
        assert np.allclose(got, want, atol=1e-12)

    def test_orbit_lengths(self):
        A = presets.cat_map()
        assert orbit(A, [0.3, 0.4], 0).shape == (0, 2)
        o1 = orbit(A, [0.3, 0.4], 1)
        assert o1.shape == (1, 2) and np.allclose(o1[0], [0.3, 0.4])

    def test_orbit_example(self):
        A = presets.cat_map()
        got = orbit(A, [0.5, 0.25], 3)
        assert np.allclose(got, [[0.5, 0.25], [0.25, 0.75], [0.25, 0.0]])

    def test_cocycle_identity_exact(self):
        A = presets.cat_map()
        gen = np.random.default_rng(3)
        for _ in range(10):
            x = gen.random(2)
            n, m = map(int, gen.integers(0, 12, 2))
            full = orbit(A, x, n + m)
            head = orbit(A, x, n)
            tail_start = A.step(head[-1]) if n > 0 else x
            tail = orbit(A, tail_start, m)
            glued = np.concatenate([head, tail]) if n and m else (head if m == 0 else tail)
            assert np.array_equal(full, glued)

    def test_coordinates_stay_canonical(self):
        A = presets.cat_map()
        pts = orbit(A, [0.9999, 0.7239], 200)
        assert np.all(pts >= 0.0) and np.all(pts < 1.0)


class TestTorusDistance:
    def test_wraparound(self):
        assert torus_distance([0.95, 0.0], [0.05, 0.0]) == pytest.approx(0.1)

    def test_axioms_on_random_triples(self):
        gen = np.random.default_rng(11)
        for _ in range(300):
            x, y, z = gen.random((3, 2))
            dxy = torus_distance(x, y)
            assert dxy == pytest.approx(torus_distance(y, x))
            assert dxy <= 0.5 + 1e-15
            assert torus_distance(x, z) <= dxy + torus_distance(y, z) + 1e-12
            assert torus_distance(x, x) == 0.0


class TestHolderRatio:
    def test_constant_observable(self):
        f = Observable(dim_out=1, eta=1.0, fn=lambda x: np.ones(x.shape[:-1] + (1,)))
        assert holder_ratio_estimate(f, 500, seed=1) == 0.0

    def test_tent_reaches_analytic_constant(self):
        f = presets.tent_x1_observable()
        est = holder_ratio_estimate(f, 20000, seed=2)
        assert est <= 1.0 + 1e-12
        assert est > 0.95

    def test_declared_bound_respected(self):
        f = presets.default_observable()
        for seed in range(5):
            assert holder_ratio_estimate(f, 4000, seed=seed) <= f.holder_constant

    def test_rejects_tiny_sample(self):
        with pytest.raises(ValueError):
            holder_ratio_estimate(presets.tent_x1_observable(), 1)


class TestMeasurePreservation:
    def test_cat_orbit_uniform_on_grid(self):
        # single-orbit cell frequencies on a 16x16 grid within 4 standard
        # errors at n = 1e6
        A = presets.cat_map()
        n = 1_000_000
        x = np.random.default_rng(7).random(2)
        counts = np.zeros((16, 16))
        pts = x[None, :]
        block = 20000
        cur = pts[0]
        remaining = n
        while remaining > 0:
            take = min(block, remaining)
            seg = A.orbit_batch(cur[None, :], take)[:, 0, :]
            idx = np.minimum((seg * 16).astype(int), 15)
            np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
            cur = A.step(seg[-1])
            remaining -= take
        p = 1.0 / 256.0
        se = np.sqrt(p * (1 - p) / n)
        rel = counts / n
        assert np.abs(rel - p).max() <= 4.0 * se


class TestIIDDriver:
    def test_orbit_starts_at_seed_point(self):
        d = IIDTorusDriver(2)
        x0 = np.array([[0.25, 0.75]])
        orb = d.orbit_batch(x0, 5)
        assert np.allclose(orb[0], x0 % 1.0)
        assert orb.shape == (5, 1, 2)

    def test_orbit_is_pure_function_of_start(self):
        d = IIDTorusDriver(2)
        x0 = np.array([[0.3, 0.6], [0.1, 0.9]])
        a = d.orbit_batch(x0, 6)
        b = np.stack([d.orbit_batch(x0[i:i + 1], 6)[:, 0, :] for i in range(2)], axis=1)
        assert np.array_equal(a, b)

    def test_fresh_points_look_uniform(self):
        d = IIDTorusDriver(2)
        x0 = np.random.default_rng(0).random((500, 2))
        orb = d.orbit_batch(x0, 40)[1:]
        flat = orb.reshape(-1, 2)
        assert abs(flat.mean() - 0.5) < 0.01
        assert abs(flat.var() - 1.0 / 12.0) < 0.01


def make_flow(amplitude=0.3):
    return presets.default_flow_system(amplitude)


class TestSpecialFlow:
    def test_zero_time_unchanged(self):
        sysf = make_flow()
        p = FlowPoint(base=np.array([0.2, 0.4]), height=0.1)
        q = special_flow_evolve(sysf, p, 0.0)
        assert np.allclose(q.base, p.base) and q.height == pytest.approx(0.1)

    def test_constant_roof_is_floor_of_t(self):
        sysf = presets.default_flow_system(0.0)       # roof identically 1
        om = np.array([0.3, 0.8])
        q = special_flow_evolve(sysf, FlowPoint(om, 0.0), 2.5)
        want = presets.cat_map().step(presets.cat_map().step(om))
        assert np.allclose(q.base, want)
        assert q.height == pytest.approx(0.5)
        assert flow_crossing_count(sysf, om, 3.7) == 3

    def test_semigroup_property(self):
        sysf = make_flow()
        gen = np.random.default_rng(5)
        for _ in range(20):
            base = gen.random(2)
            s, t = gen.random(2) * 3.0
            p = FlowPoint(base, 0.0)
            one = special_flow_evolve(sysf, special_flow_evolve(sysf, p, s), t)
            two = special_flow_evolve(sysf, p, s + t)
            assert np.allclose(one.base, two.base, atol=1e-12)
            assert one.height == pytest.approx(two.height, abs=1e-12)

    def test_crossing_count_against_prefix_sums(self):
        sysf = make_flow()
        gen = np.random.default_rng(9)
        A = presets.cat_map()
        for _ in range(20):
            om = gen.random(2)
            t = float(gen.random() * 8.0)
            # independent oracle: explicit prefix-sum scan
            total, n, cur = 0.0, 0, om.copy()
            while True:
                tau = float(sysf.roof_values(cur[None, :])[0])
                if total + tau > t:
                    break
                total += tau
                n += 1
                cur = A.step(cur)
            assert flow_crossing_count(sysf, om, t) == n

    def test_crossing_count_monotone_in_t(self):
        sysf = make_flow()
        om = np.array([0.15, 0.55])
        grid = np.linspace(0.0, 10.0, 97)
        counts = [flow_crossing_count(sysf, om, t) for t in grid]
        assert all(b >= a for a, b in zip(counts, counts[1:]))

    def test_invariants_validated(self):
        with pytest.raises(ValueError):
            SpecialFlowSystem(base=presets.cat_map(), roof=presets.default_roof(),
                              roof_inf=0.0, roof_sup=1.3)
        sysf = make_flow()
        with pytest.raises(ValueError):
            special_flow_evolve(sysf, FlowPoint(np.array([0.0, 0.0]), 0.0), -1.0)

    def test_inconsistent_roof_detected(self):
        bad_roof = Observable(dim_out=1, eta=1.0,
                              fn=lambda x: 0.5 * np.ones(x.shape[:-1] + (1,)))
        sysf = SpecialFlowSystem(base=presets.cat_map(), roof=bad_roof,
                                 roof_inf=0.7, roof_sup=1.3)
        with pytest.raises(ValueError):
            special_flow_evolve(sysf, FlowPoint(np.array([0.1, 0.2]), 0.0), 1.0)
