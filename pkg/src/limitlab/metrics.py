"""Finite-support measures and exact / certified probability metrics.

The Prokhorov distance is computed through the coupling characterization:
a tolerance eps is feasible iff the bipartite transport graph that links
atoms closer than eps (sup norm, closed condition) routes at least mass
1 - eps.  Feasibility is monotone in eps, so the infimum is found by a
search over the sorted pairwise distances (small instances, exact up to
capacity rounding) or by bisection to a requested tolerance (large
instances).  A subset-enumeration oracle evaluates the defining supremum
directly and stays independent of the flow path.
"""

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.csgraph import maximum_flow

from . import rng as _rng

__all__ = [
    "FiniteMeasure",
    "CoupledSample",
    "GaussianSpec",
    "prokhorov",
    "prokhorov_oracle",
    "ky_fan",
    "ky_fan_weighted",
    "bounded_lipschitz",
    "gaussian_sample",
    "coupling_kyfan_upper",
    "random_coupling",
]

_SCALE = int(1e9)           # capacity scale; the flow solver is int32-only
_FEAS_SLACK = 1e-12         # absolute feasibility slack on routed mass
_EXACT_PAIR_LIMIT = 2_000_000   # atom-pair budget for the exact search path
_ORACLE_CAP = 12
_BL_CAP = 500


@dataclass(frozen=True, eq=False)
class FiniteMeasure:
    """Probability measure with finitely many atoms in R^d.

    Atoms are pairwise distinct (duplicates are merged at construction) and
    weights are nonnegative, summing to 1 within 1e-12 before an exact
    renormalization.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __init__(self, atoms, weights):
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
        if atoms.shape[0] != weights.size:
            raise ValueError("atoms and weights must have matching lengths")
        if atoms.shape[0] == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(weights < -1e-15):
            raise ValueError("weights must be nonnegative")
        weights = np.maximum(weights, 0.0)
        total = float(weights.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, got {total!r}")
        uniq, inverse = np.unique(atoms, axis=0, return_inverse=True)
        if uniq.shape[0] != atoms.shape[0]:
            merged = np.zeros(uniq.shape[0])
            np.add.at(merged, inverse, weights)
            atoms, weights = uniq, merged
        keep = weights > 0.0
        if not np.all(keep) and keep.any():
            atoms, weights = atoms[keep], weights[keep]
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights / weights.sum())

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def n_atoms(self):
        return self.atoms.shape[0]

    @classmethod
    def from_samples(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, x):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])

    def to_csv(self, path):
        """Write `x_1..x_d,weight` rows with a mandatory header (UTF-8)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(self.dim)] + ["weight"])
            for atom, wt in zip(self.atoms, self.weights):
                w.writerow([repr(float(v)) for v in atom] + [repr(float(wt))])

    @classmethod
    def from_csv(cls, path):
        """Load a measure; weights off 1 by more than 1e-9 are rejected."""
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError("empty file")
        header = rows[0]
        d = len(header) - 1
        if d < 1 or header != [f"x_{i + 1}" for i in range(d)] + ["weight"]:
            raise ValueError(f"bad header {header!r}; expected x_1..x_d,weight")
        body = [[float(v) for v in row] for row in rows[1:] if row]
        if not body:
            raise ValueError("no atoms in file")
        arr = np.asarray(body)
        atoms, weights = arr[:, :d], arr[:, d]
        total = weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total!r}, farther than 1e-9 from 1")
        return cls(atoms, weights / total)


@dataclass(frozen=True, eq=False)
class CoupledSample:
    """Equally weighted sample of pairs (x, y) on one probability space."""

    x: np.ndarray
    y: np.ndarray

    def __init__(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if x.shape != y.shape or x.shape[0] == 0:
            raise ValueError("need matching, nonempty pair arrays")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Mean vector plus symmetric PSD covariance (tiny negatives clamped)."""

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov must be d x d for mean in R^d")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("cov must be symmetric within 1e-12")
        cov = 0.5 * (cov + cov.T)
        evals = np.linalg.eigvalsh(cov)
        if evals.min() < -1e-10 * scale:
            raise ValueError(f"cov not PSD beyond clamp tolerance (min eigenvalue {evals.min()!r})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def _chebyshev(P, Q):
    """Pairwise sup-norm distances, shape (len(P), len(Q))."""
    return np.abs(P[:, None, :] - Q[None, :, :]).max(axis=-1)


def _integer_weights(weights, scale=_SCALE):
    """Largest-remainder rounding to integers summing exactly to `scale`."""
    w = np.asarray(weights, dtype=float)
    raw = w * scale
    base = np.floor(raw).astype(np.int64)
    short = scale - int(base.sum())
    if short > 0:
        order = np.argsort(raw - base)[::-1]
        base[order[:short]] += 1
    elif short < 0:
        order = np.argsort(raw - base)
        base[order[:-short]] -= 1
    return base


def _maxflow_value(rows, cols, cap_p, cap_q, need_flow=False):
    """Max flow through the bipartite threshold graph, integer capacities."""
    n_p, n_q = cap_p.size, cap_q.size
    n = n_p + n_q + 2
    src, snk = 0, n - 1
    e = rows.size
    data = np.concatenate([cap_p, np.full(e, _SCALE, dtype=np.int64),
                           cap_q]).astype(np.int32)
    ri = np.concatenate([np.zeros(n_p, dtype=np.int64), rows + 1, np.arange(n_q) + 1 + n_p])
    ci = np.concatenate([np.arange(n_p) + 1, cols + 1 + n_p, np.full(n_q, snk, dtype=np.int64)])
    graph = sparse.csr_matrix((data, (ri, ci)), shape=(n, n))
    res = maximum_flow(graph, src, snk)
    if not need_flow:
        return int(res.flow_value), None
    mid = res.flow[1:n_p + 1, n_p + 1:n_p + 1 + n_q].tocoo()
    return int(res.flow_value), (mid.row, mid.col, mid.data)


def _sorted_q(Q_atoms):
    order = np.argsort(Q_atoms[:, 0], kind="stable")
    return Q_atoms[order], order


def _edges_within(P_atoms, Q_sorted, order, eps):
    """Edges (i, j) with |P_i - Q_j|_inf <= eps via coordinate-0 slicing."""
    lo = np.searchsorted(Q_sorted[:, 0], P_atoms[:, 0] - eps, side="left")
    hi = np.searchsorted(Q_sorted[:, 0], P_atoms[:, 0] + eps, side="right")
    rows, cols = [], []
    rest = Q_sorted[:, 1:]
    for i in range(P_atoms.shape[0]):
        a, b = lo[i], hi[i]
        if a >= b:
            continue
        if rest.shape[1]:
            ok = np.abs(rest[a:b] - P_atoms[i, 1:]).max(axis=1) <= eps
            idx = np.nonzero(ok)[0]
        else:
            idx = np.arange(b - a)
        if idx.size:
            rows.append(np.full(idx.size, i, dtype=np.int64))
            cols.append(order[a + idx])
    if not rows:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(cols)


def _feasible(flow_value, eps):
    return flow_value / _SCALE >= 1.0 - eps - _FEAS_SLACK


def _prokhorov_exact(P, Q):
    """Infimum over the breakpoint structure; exact up to capacity rounding."""
    cp, cq = _integer_weights(P.weights), _integer_weights(Q.weights)
    D = _chebyshev(P.atoms, Q.atoms)
    dvals = np.unique(D)
    flat_r, flat_c = np.divmod(np.argsort(D, axis=None, kind="stable"), D.shape[1])
    flat_d = D[flat_r, flat_c]

    def flow_at(eps):
        k = np.searchsorted(flat_d, eps, side="right")
        v1, _ = _maxflow_value(flat_r[:k], flat_c[:k], cp, cq)
        v2, _ = _maxflow_value(flat_c[:k], flat_r[:k], cq, cp)
        return min(v1, v2)

    # first breakpoint index where feasibility holds (monotone in the index)
    lo_i, hi_i = 0, dvals.size - 1
    if not _feasible(flow_at(dvals[hi_i]), dvals[hi_i]):
        # only possible when every distance exceeds 1; eps = 1 is feasible
        return 1.0
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if _feasible(flow_at(dvals[mid]), dvals[mid]):
            hi_i = mid
        else:
            lo_i = mid + 1
    k_star = lo_i
    prev_flow = flow_at(dvals[k_star - 1]) if k_star > 0 else 0
    candidate = 1.0 - prev_flow / _SCALE
    return float(min(min(dvals[k_star], candidate), 1.0))


def _greedy_bounds(Pa, Q_sorted, order, cp, cq_sorted, eps):
    """Greedy transport lower bound and covered-capacity upper bound on the
    max routed mass at threshold eps.  Streams per source atom, never
    materializing the full edge set."""
    lo = np.searchsorted(Q_sorted[:, 0], Pa[:, 0] - eps, side="left")
    hi = np.searchsorted(Q_sorted[:, 0], Pa[:, 0] + eps, side="right")
    rest = Q_sorted[:, 1:]
    remaining = cq_sorted.astype(np.int64).copy()
    covered = np.zeros(Q_sorted.shape[0], dtype=bool)
    routed = 0
    for i in range(Pa.shape[0]):
        a, b = lo[i], hi[i]
        if a >= b:
            continue
        if rest.shape[1]:
            ok = np.abs(rest[a:b] - Pa[i, 1:]).max(axis=1) <= eps
            idx = a + np.nonzero(ok)[0]
        else:
            idx = np.arange(a, b)
        if idx.size == 0:
            continue
        covered[idx] = True
        caps = remaining[idx]
        csum = np.cumsum(caps)
        need = int(cp[i])
        if csum[-1] <= need:
            routed += int(csum[-1])
            remaining[idx] = 0
        else:
            k = int(np.searchsorted(csum, need, side="left"))
            if k > 0:
                routed += int(csum[k - 1])
                remaining[idx[:k]] = 0
                need -= int(csum[k - 1])
            remaining[idx[k]] -= need
            routed += need
    upper = int(cq_sorted[covered].sum())
    return routed, upper


def _prokhorov_bisect(P, Q, tol, bracket):
    """Bisection of the feasibility indicator to absolute tolerance tol.

    Each probe first tries a greedy routed-mass lower bound and a covered
    -capacity upper bound; the exact max flow runs only when the bounds
    straddle the feasibility threshold."""
    Pa, Qa = P.atoms, Q.atoms
    if Pa.shape[0] > Qa.shape[0]:
        Pa, Qa = Qa, Pa
        cp, cq = _integer_weights(Q.weights), _integer_weights(P.weights)
    else:
        cp, cq = _integer_weights(P.weights), _integer_weights(Q.weights)
    Q_sorted, order = _sorted_q(Qa)
    cq_sorted = cq[order]

    def feasible(eps):
        need = (1.0 - eps - _FEAS_SLACK) * _SCALE
        routed, upper = _greedy_bounds(Pa, Q_sorted, order, cp, cq_sorted, eps)
        if routed >= need:
            return True
        if upper < need:
            return False
        rows, cols = _edges_within(Pa, Q_sorted, order, eps)
        val, _ = _maxflow_value(rows, cols, cp, cq)
        return _feasible(val, eps)

    lo, hi = bracket
    step = max(0.05, hi - lo)
    while hi < 1.0 and not feasible(hi):
        lo = hi
        hi = min(1.0, hi + step)
        step *= 2.0
    step = max(0.05, hi - lo)
    while lo > 0.0 and feasible(lo):
        hi = lo
        lo = max(0.0, lo - step)
        step *= 2.0
    if lo == 0.0 and feasible(0.0):
        return 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _stride_subsample(M, cap):
    if M.n_atoms <= cap:
        return M
    stride = int(np.ceil(M.n_atoms / cap))
    atoms = M.atoms[::stride]
    w = M.weights[::stride]
    return FiniteMeasure(atoms, w / w.sum())


def prokhorov(P: FiniteMeasure, Q: FiniteMeasure, tol: float = 1e-9) -> float:
    """Prokhorov distance between finite-support measures, within tol.

    Small instances are resolved exactly on the breakpoint set of pairwise
    distances; large ones by bisection, bracketed by a strided-subsample
    estimate and verified on both ends.  The result lies in [0, 1].
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if P.dim != Q.dim:
        raise ValueError("measures must live in the same dimension")
    if P.n_atoms == Q.n_atoms and np.array_equal(P.atoms, Q.atoms) \
            and np.allclose(P.weights, Q.weights, rtol=0.0, atol=1e-15):
        return 0.0
    if P.n_atoms * Q.n_atoms <= _EXACT_PAIR_LIMIT:
        return _prokhorov_exact(P, Q)
    sub_p = _stride_subsample(P, 1500)
    sub_q = _stride_subsample(Q, 4000)
    est = _prokhorov_bisect(sub_p, sub_q, max(tol, 5e-3), (0.0, 0.3))
    bracket = (max(0.0, est - 0.05), min(1.0, est + 0.05))
    return float(min(_prokhorov_bisect(P, Q, tol, bracket), 1.0))


def prokhorov_oracle(P: FiniteMeasure, Q: FiniteMeasure) -> float:
    """Defining supremum evaluated by subset enumeration (<= 12 atoms a side).

    For each subset B of one support, the smallest eps with
    P(B) - Q(B^eps) <= eps is found on the breakpoints of the distances
    from B plus the mass-gap solutions; the result is the larger of the two
    one-sided values.
    """
    if P.n_atoms > _ORACLE_CAP or Q.n_atoms > _ORACLE_CAP:
        raise ValueError(f"oracle supports at most {_ORACLE_CAP} atoms per measure")

    def one_sided(A, B):
        D = _chebyshev(A.atoms, B.atoms)
        worst = 0.0
        for mask in range(1, 2 ** A.n_atoms):
            sel = [(mask >> i) & 1 for i in range(A.n_atoms)]
            idx = np.nonzero(sel)[0]
            pb = float(A.weights[idx].sum())
            delta = D[idx].min(axis=0)
            order = np.argsort(delta)
            u, starts = np.unique(delta[order], return_index=True)
            cumw = np.cumsum(B.weights[order])
            ends = np.append(starts[1:], delta.size) - 1
            mass_at = cumw[ends]                  # Q(B^eps) for eps in [u_k, u_{k+1})
            best = pb if pb < u[0] else np.inf    # interval [0, u_0): Q mass 0
            for k in range(u.size):
                nxt = u[k + 1] if k + 1 < u.size else np.inf
                cand = max(u[k], pb - mass_at[k])
                if cand < nxt or k + 1 == u.size:
                    best = min(best, cand)
            worst = max(worst, best)
        return worst

    return float(min(max(one_sided(P, Q), one_sided(Q, P)), 1.0))


def ky_fan_weighted(dists, weights) -> float:
    """Smallest eps with (mass at distance > eps) < eps, by breakpoint scan."""
    d = np.asarray(dists, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    order = np.argsort(d)
    d, w = d[order], w[order]
    u, starts = np.unique(d, return_index=True)
    cumw = np.cumsum(w)
    ends = np.append(starts[1:], d.size) - 1
    total = cumw[-1]
    tail = total - cumw[ends]                     # mass strictly above u_k
    best = np.inf
    if u[0] > 0 and total < u[0]:
        best = total
    for k in range(u.size):
        nxt = u[k + 1] if k + 1 < u.size else np.inf
        cand = max(u[k], tail[k])
        if cand < nxt:
            best = min(best, cand)
    return float(best)


def ky_fan(s: CoupledSample) -> float:
    """Ky Fan distance of an equally weighted empirical coupling."""
    d = np.abs(s.x - s.y).max(axis=-1)
    n = d.size
    return ky_fan_weighted(d, np.full(n, 1.0 / n))


def bounded_lipschitz(P: FiniteMeasure, Q: FiniteMeasure) -> float:
    """Bounded-Lipschitz distance by linear programming on the supports.

    Potentials phi on the union of supports together with the split
    a + b = 1 of the norm budget: maximize sum (p - q) phi subject to
    |phi_k| <= a and |phi_k - phi_l| <= b |u_k - u_l|_inf.
    """
    if P.dim != Q.dim:
        raise ValueError("measures must live in the same dimension")
    if P.n_atoms + Q.n_atoms > _BL_CAP:
        raise ValueError(f"combined support exceeds {_BL_CAP} atoms; subsample first")
    stacked = np.vstack([P.atoms, Q.atoms])
    union, inverse = np.unique(stacked, axis=0, return_inverse=True)
    n = union.shape[0]
    c = np.zeros(n)
    np.add.at(c, inverse[:P.n_atoms], P.weights)
    np.add.at(c, inverse[P.n_atoms:], -Q.weights)
    if n == 1 or np.abs(c).max() < 1e-15:
        return 0.0
    D = _chebyshev(union, union)
    pairs = list(itertools.combinations(range(n), 2))
    m = 2 * len(pairs) + 2 * n
    rows = np.empty(3 * 2 * len(pairs) + 2 * 2 * n, dtype=np.int64)
    cols = np.empty_like(rows)
    vals = np.empty(rows.size)
    b_ub = np.empty(m)
    pos = 0
    r = 0
    for k, l in pairs:
        for sgn in (1.0, -1.0):
            rows[pos:pos + 3] = r
            cols[pos:pos + 3] = (k, l, n)
            vals[pos:pos + 3] = (sgn, -sgn, -D[k, l])
            b_ub[r] = 0.0
            pos += 3
            r += 1
    for k in range(n):
        for sgn in (1.0, -1.0):
            rows[pos:pos + 2] = r
            cols[pos:pos + 2] = (k, n)
            vals[pos:pos + 2] = (sgn, 1.0)
            b_ub[r] = 1.0
            pos += 2
            r += 1
    A_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(m, n + 1))
    obj = np.concatenate([-c, [0.0]])
    res = linprog(obj, A_ub=A_ub, b_ub=b_ub,
                  bounds=[(-1.0, 1.0)] * n + [(0.0, 1.0)], method="highs")
    if res.status != 0:
        raise RuntimeError(f"BL linear program failed unexpectedly: {res.message}")
    return float(max(-res.fun, 0.0))


def gaussian_sample(g: GaussianSpec, m: int, seed) -> FiniteMeasure:
    """m i.i.d. draws from N(mean, cov) as an equally weighted measure.

    Uses the eigenvalue square root of cov; degenerate directions collapse
    onto the mean.  The same seed yields the same measure everywhere.
    """
    if m < 1:
        raise ValueError("need at least one draw")
    evals, vecs = np.linalg.eigh(g.cov)
    evals = np.clip(evals, 0.0, None)
    root = vecs * np.sqrt(evals)[None, :]
    gen = _rng.substream(seed, _rng.GAUSSIAN_REF)
    z = gen.standard_normal((m, g.mean.size))
    return FiniteMeasure.from_samples(g.mean[None, :] + z @ root.T)


def coupling_kyfan_upper(P: FiniteMeasure, Q: FiniteMeasure, tol: float = 1e-9) -> float:
    """Ky Fan value of the transport witness at the Prokhorov optimum.

    Routes mass along the optimal-threshold flow and pairs the leftover
    mass arbitrarily; the value lies in [prokhorov, prokhorov + tol].
    """
    pi = prokhorov(P, Q, tol)
    cp, cq = _integer_weights(P.weights), _integer_weights(Q.weights)
    Q_sorted, order = _sorted_q(Q.atoms)
    rows, cols = _edges_within(P.atoms, Q_sorted, order, pi + 0.5 * tol)
    value, flow = _maxflow_value(rows, cols, cp, cq, need_flow=True)
    fr, fc, fv = flow
    dists = np.abs(P.atoms[fr] - Q.atoms[fc]).max(axis=-1) if fr.size else np.empty(0)
    masses = fv.astype(float) / _SCALE
    # leftover marginal mass, paired greedily in index order
    used_p = np.zeros(P.n_atoms)
    used_q = np.zeros(Q.n_atoms)
    np.add.at(used_p, fr, masses)
    np.add.at(used_q, fc, masses)
    res_p = np.maximum(cp / _SCALE - used_p, 0.0)
    res_q = np.maximum(cq / _SCALE - used_q, 0.0)
    extra_d, extra_m = [], []
    i = j = 0
    while i < res_p.size and j < res_q.size:
        if res_p[i] <= 1e-15:
            i += 1
            continue
        if res_q[j] <= 1e-15:
            j += 1
            continue
        take = min(res_p[i], res_q[j])
        extra_d.append(np.abs(P.atoms[i] - Q.atoms[j]).max())
        extra_m.append(take)
        res_p[i] -= take
        res_q[j] -= take
    all_d = np.concatenate([dists, np.asarray(extra_d)]) if extra_d else dists
    all_m = np.concatenate([masses, np.asarray(extra_m)]) if extra_m else masses
    if all_d.size == 0:
        return 0.0
    return ky_fan_weighted(all_d, all_m)


def random_coupling(P: FiniteMeasure, Q: FiniteMeasure, seed) -> tuple:
    """A random transport plan with marginals P and Q (northwest corner on
    shuffled atom orders).  Returns (distances, masses) for Ky Fan checks."""
    gen = _rng.substream(seed, _rng.COUPLING)
    pi = gen.permutation(P.n_atoms)
    qi = gen.permutation(Q.n_atoms)
    wp = P.weights[pi].copy()
    wq = Q.weights[qi].copy()
    dists, masses = [], []
    i = j = 0
    while i < wp.size and j < wq.size:
        take = min(wp[i], wq[j])
        if take > 1e-15:
            dists.append(np.abs(P.atoms[pi[i]] - Q.atoms[qi[j]]).max())
            masses.append(take)
        wp[i] -= take
        wq[j] -= take
        if wp[i] <= 1e-15:
            i += 1
        if j < wq.size and wq[j] <= 1e-15:
            j += 1
    return np.asarray(dists), np.asarray(masses)
