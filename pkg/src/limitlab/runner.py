"""Batch experiment runner: deterministic ensembles, CSV outputs, caching.

Each experiment kind writes its documented CSV files into a run directory
keyed by the config hash.  Ensemble work is dispatched over fixed-size
trajectory chunks whose boundaries never depend on the worker count, and
all cross-trajectory reductions happen in the parent process in index
order, so outputs are byte-identical for any worker count.
"""

import functools
import json
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import averaging as avg_mod
from . import clt as clt_mod
from . import metrics as met
from . import presets
from . import rng as _rng
from . import specialflow as sf_mod
from .config import ExperimentConfig
from .dynamics import IIDTorusDriver, ToralAutomorphism

__all__ = ["RunRecord", "RunnerError", "run", "make_mapper", "list_experiments"]


class RunnerError(RuntimeError):
    pass


@dataclass(eq=False)
class RunRecord:
    kind: str
    config_hash: str
    started: float
    finished: float
    outputs: list
    summary: dict
    cached: bool = False

    def to_json(self):
        return json.dumps({
            "kind": self.kind,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
            "outputs": self.outputs,
            "summary": self.summary,
            "version": __version__,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(kind=d["kind"], config_hash=d["config_hash"],
                   started=d["started"], finished=d["finished"],
                   outputs=d["outputs"], summary=d["summary"], cached=True)


def _apply_chunk(args):
    fn, s, e = args
    return fn(s, e)


def make_mapper(workers: int):
    """Order-preserving chunk mapper; None means run in process."""
    if workers is None or workers <= 1:
        return None

    def mapper(fn, bounds):
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_apply_chunk, [(fn, s, e) for s, e in bounds]))

    return mapper


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return os.path.basename(path)


def _driver_from(cfg):
    if cfg["driver"] == "cat":
        m = np.asarray(cfg["matrix"], dtype=int)
        side = int(round(math.sqrt(m.size)))
        return ToralAutomorphism(m.reshape(side, side))
    if cfg["driver"] == "iid":
        return IIDTorusDriver(dim=2)
    raise RunnerError(f"unknown driver {cfg['driver']!r}")


def _observable_from(cfg, key="observable"):
    name = cfg.get(key)
    if name not in presets.OBSERVABLES:
        raise RunnerError(f"unknown observable {name!r}")
    return presets.OBSERVABLES[name]()


def _system_from(cfg):
    name = cfg["system"]
    if name not in presets.SYSTEMS:
        raise RunnerError(f"unknown system {name!r}")
    return presets.SYSTEMS[name]()


_X0 = np.array([1.0, 0.5])


# --- experiment implementations -------------------------------------------


def _random_measure(gen, max_atoms=6, dims=(1, 2, 3)):
    d = int(gen.choice(dims))
    n = int(gen.integers(1, max_atoms + 1))
    atoms = gen.normal(size=(n, d))
    if n == 1:
        w = np.array([1.0])
    else:
        cuts = np.sort(gen.random(n - 1))
        w = np.diff(np.concatenate([[0.0], cuts, [1.0]]))
    return met.FiniteMeasure(atoms, w)


def _exp_metric_selftest(cfg, mapper, outdir):
    seed = cfg["seed"]
    rows = []
    ok = True

    worst = 0.0
    for i in range(cfg["oracle_pairs"]):
        gen = _rng.substream(seed, _rng.GENERIC, 1, i)
        d = int(gen.choice((1, 2, 3)))
        P = _random_measure(gen, 6, (d,))
        Q = _random_measure(gen, 6, (d,))
        diff = abs(met.prokhorov(P, Q, 1e-9) - met.prokhorov_oracle(P, Q))
        worst = max(worst, diff)
    passed = worst <= 1e-8
    ok &= passed
    rows.append(("oracle-equivalence", cfg["oracle_pairs"], worst, passed))

    worst = 0.0
    for i in range(cfg["sandwich_pairs"]):
        gen = _rng.substream(seed, _rng.GENERIC, 2, i)
        d = int(gen.choice((1, 2, 3)))
        P = _random_measure(gen, 8, (d,))
        Q = _random_measure(gen, 8, (d,))
        pi = met.prokhorov(P, Q, 1e-9)
        bl = met.bounded_lipschitz(P, Q)
        worst = max(worst, bl / 3.0 - pi, pi - math.sqrt(1.5 * bl))
    d0, d1 = met.FiniteMeasure.point_mass([0.0]), met.FiniteMeasure.point_mass([1.0])
    pi01, bl01 = met.prokhorov(d0, d1, 1e-9), met.bounded_lipschitz(d0, d1)
    worst = max(worst, abs(pi01 - 1.0), abs(bl01 - 2.0 / 3.0),
                abs(pi01 - math.sqrt(1.5 * bl01)))
    passed = worst <= 1e-6
    ok &= passed
    rows.append(("sandwich-inequality", cfg["sandwich_pairs"], worst, passed))

    worst = 0.0
    for i in range(cfg["coupling_pairs"]):
        gen = _rng.substream(seed, _rng.GENERIC, 3, i)
        d = int(gen.choice((1, 2, 3)))
        P = _random_measure(gen, 6, (d,))
        Q = _random_measure(gen, 6, (d,))
        pi = met.prokhorov(P, Q, 1e-9)
        up = met.coupling_kyfan_upper(P, Q, 1e-6)
        worst = max(worst, pi - up, up - pi - 1e-6)
        for j in range(cfg["couplings_per_pair"]):
            dists, masses = met.random_coupling(P, Q, seed * 1000003 + i * 1000 + j)
            kf = met.ky_fan_weighted(dists, masses)
            worst = max(worst, pi - kf)
    passed = worst <= 1e-6
    ok &= passed
    rows.append(("coupling-bound", cfg["coupling_pairs"], worst, passed))

    out = _write_csv(os.path.join(outdir, "selftest.csv"),
                     ("suite", "cases", "worst", "passed"), rows)
    return [out], {"ok": bool(ok), "suites": {r[0]: bool(r[3]) for r in rows}}


def _exp_clt_rate(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    f = _observable_from(cfg)
    seed = cfg["seed"]
    res = clt_mod.clt_rate_experiment(
        driver, f, cfg["n_grid"], cfg["ensemble"], cfg["gaussian_m"], seed,
        tol=cfg["tol"], lag_cap=cfg["lag_cap"], mc_samples=cfg["mc_samples"],
        mapper=mapper)
    outs = []
    rows = [(n, p, flag, cfg["ensemble"], cfg["gaussian_m"], seed)
            for n, p, flag in zip(res.ns, res.pi_hats, res.floor_flags)]
    outs.append(_write_csv(os.path.join(outdir, "rates.csv"),
                           ("n", "pi_hat", "pi_floor_flag", "ensemble",
                            "gaussian_m", "seed"), rows))
    summary = {"ok": True, "degenerate": bool(res.degenerate),
               "truncation_warning": bool(res.cov.truncation_warning)}
    if res.fit is not None:
        outs.append(_write_csv(os.path.join(outdir, "regression.csv"),
                               ("slope", "stderr", "r2"),
                               [(res.fit.slope, res.fit.stderr, res.fit.r2)]))
        summary["slope"] = res.fit.slope
        summary["r2"] = res.fit.r2
    summary["inversions"] = sum(1 for a, b in zip(res.pi_hats, res.pi_hats[1:])
                                if b >= a)
    if cfg["cov_check_n"] > 0:
        n_chk = cfg["cov_check_n"]
        sums = clt_mod._chunked(
            cfg["cov_check_samples"],
            functools.partial(clt_mod.birkhoff_checkpoint_chunk,
                              driver, f, [n_chk], seed,
                              purpose=_rng.COV_CHECK),
            mapper)
        block = sums[0]
        emp = block.T @ block / block.shape[0]
        series = res.cov.cov.entries
        rows = [(i, j, series[i, j], emp[i, j], abs(series[i, j] - emp[i, j]))
                for i in range(series.shape[0]) for j in range(series.shape[1])]
        outs.append(_write_csv(os.path.join(outdir, "covariance.csv"),
                               ("i", "j", "series", "empirical", "abs_diff"),
                               rows))
        summary["max_cov_diff"] = float(np.abs(series - emp).max())
    return outs, summary


def _exp_coboundary(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    name = cfg["observable"] if cfg["observable"] != "default" else "sin-x1"
    h = presets.OBSERVABLES[name]()
    seed = cfg["seed"]
    res = clt_mod.coboundary_degenerate_experiment(
        driver, h, cfg["n_grid"], cfg["ensemble"], seed,
        lag_cap=cfg["lag_cap"], mc_samples=cfg["mc_samples"], mapper=mapper)
    outs = []
    outs.append(_write_csv(os.path.join(outdir, "variance.csv"),
                           ("n", "var_times_n"),
                           list(zip(res.ns, res.var_times_n))))
    rows = [(n, p, False, cfg["ensemble"], 0, seed)
            for n, p in zip(res.ns, res.pi_hats)]
    outs.append(_write_csv(os.path.join(outdir, "rates.csv"),
                           ("n", "pi_hat", "pi_floor_flag", "ensemble",
                            "gaussian_m", "seed"), rows))
    summary = {"ok": True, "d_norm": res.d_norm, "var_slope": res.var_slope}
    if res.pi_fit is not None:
        outs.append(_write_csv(os.path.join(outdir, "regression.csv"),
                               ("slope", "stderr", "r2"),
                               [(res.pi_fit.slope, res.pi_fit.stderr, res.pi_fit.r2)]))
        summary["pi_slope"] = res.pi_fit.slope
    return outs, summary


def _exp_decorrelation(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    f = _observable_from(cfg)
    g = f if cfg.get("observable_g") is None else presets.OBSERVABLES[cfg.get("observable_g")]()
    prof = clt_mod.decorrelation_profile(driver, f, g, cfg["n_max"],
                                         cfg["mc_samples"], cfg["seed"])
    outs = [_write_csv(os.path.join(outdir, "profile.csv"),
                       ("lag", "cov_norm", "stderr"),
                       list(zip(prof.lags, prof.cov_norms, prof.stderrs)))]
    outs.append(_write_csv(os.path.join(outdir, "fit.csv"),
                           ("fitted_delta", "fitted_poly_degree", "r2", "status"),
                           [(prof.fitted_delta, prof.fitted_poly_degree,
                             prof.r2, prof.status)]))
    return outs, {"ok": True, "status": prof.status,
                  "fitted_delta": None if math.isnan(prof.fitted_delta) else prof.fitted_delta}


def _exp_averaging_rate(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    sys = _system_from(cfg)
    seed = cfg["seed"]
    res = avg_mod.averaging_rate_experiment(
        sys, driver, _X0, cfg["s_time"], cfg["eps_grid"], cfg["ensemble"],
        cfg["gaussian_m"], seed, tol=cfg["tol"], substeps=cfg["substeps"],
        sigma_cells=cfg["sigma_cells"], mc_samples=cfg["mc_samples"],
        mapper=mapper)
    outs = []
    rows = [(e, p, cfg["gaussian_m"], seed)
            for e, p in zip(res.eps_grid, res.pi_hats)]
    outs.append(_write_csv(os.path.join(outdir, "rate.csv"),
                           ("epsilon", "pi_hat", "gaussian_m", "seed"), rows))
    outs.append(_write_csv(os.path.join(outdir, "regression.csv"),
                           ("slope", "stderr", "r2"),
                           [(res.fit.slope, res.fit.stderr, res.fit.r2)]))
    sig = res.sigma.entries
    outs.append(_write_csv(os.path.join(outdir, "sigma.csv"), ("i", "j", "value"),
                           [(i, j, sig[i, j]) for i in range(sig.shape[0])
                            for j in range(sig.shape[1])]))
    summary = {"ok": True, "slope": res.fit.slope, "r2": res.fit.r2,
               "degenerate": bool(res.degenerate),
               "inversions": sum(1 for a, b in zip(res.pi_hats, res.pi_hats[1:])
                                 if b >= a)}
    if cfg["sigma_check"]:
        avg = avg_mod.average_field(sys)
        rows = []
        gaps = {}
        within = {}
        check_ms = cfg["sigma_check_m"] or tuple(cfg["direct_m"]
                                                 for _ in cfg["sigma_check"])
        if len(check_ms) != len(cfg["sigma_check"]):
            raise RunnerError("sigma_check_m must align with sigma_check")
        for n_cells, m_direct in zip(cfg["sigma_check"], check_ms):
            ser = avg_mod.sigma_F(sys, avg, driver, _X0, n_cells,
                                  lag_cap=cfg["lag_cap"],
                                  mc_samples=cfg["mc_samples"], seed=seed)
            direct, se = avg_mod.direct_sigma_ensemble(
                sys, avg, driver, _X0, n_cells, m_direct, seed,
                mapper=mapper)
            gap = np.abs(ser.entries - direct)
            gaps[str(n_cells)] = float(gap.max())
            within[str(n_cells)] = bool(np.all(gap <= 3.0 * se))
            for i in range(direct.shape[0]):
                for j in range(direct.shape[1]):
                    rows.append((n_cells, i, j, ser.entries[i, j],
                                 direct[i, j], se[i, j]))
        outs.append(_write_csv(os.path.join(outdir, "sigma_check.csv"),
                               ("n_cells", "i", "j", "series", "direct", "se"),
                               rows))
        summary["sigma_gaps"] = gaps
        summary["sigma_within_3se"] = within
    return outs, summary


def _exp_lp_scaling(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    sys = _system_from(cfg)
    seed = cfg["seed"]
    res = avg_mod.sup_error_lp_scaling(
        sys, driver, _X0, cfg["eps_grid"], cfg["ensemble"], cfg["p_list"],
        cfg["t0"], seed, substeps=cfg["substeps"], mapper=mapper)
    outs = []
    rows = [(st.epsilon, st.samples, p, st.lp_values[p])
            for st in res.stats for p in sorted(st.lp_values)]
    outs.append(_write_csv(os.path.join(outdir, "scaling.csv"),
                           ("epsilon", "ensemble", "p", "lp_value"), rows))
    regs = [(p, res.fits[p].slope, res.fits[p].stderr, res.fits[p].r2,
             res.lognorm_fits[p].slope) for p in sorted(res.fits)]
    outs.append(_write_csv(os.path.join(outdir, "regression_p.csv"),
                           ("p", "slope", "stderr", "r2", "slope_lognorm"), regs))
    summary = {"ok": True,
               "slopes": {str(p): res.fits[p].slope for p in res.fits}}
    if cfg["gronwall"] == "on":
        grows = []
        violations = 0
        avg = avg_mod.average_field(sys)
        for eps in cfg["eps_grid"]:
            s1, s2 = avg_mod.gronwall_ensemble(sys, driver, _X0, eps, cfg["t0"],
                                               cfg["ensemble"], seed,
                                               substeps=cfg["substeps"],
                                               avg=avg, mapper=mapper)
            bad = int(np.sum(s1 < -1e-6) + np.sum(s2 < -1e-6))
            violations += bad
            grows.append((eps, s1.size, float(s1.min()), float(s2.min()), bad))
        outs.append(_write_csv(os.path.join(outdir, "gronwall.csv"),
                               ("epsilon", "trajectories", "min_slack1",
                                "min_slack2", "violations"), grows))
        summary["gronwall_violations"] = violations
        summary["ok"] = bool(summary["ok"] and violations == 0)
    return outs, summary


def _exp_approximant_gap(cfg, mapper, outdir):
    driver = _driver_from(cfg)
    sys = _system_from(cfg)
    seed = cfg["seed"]
    res = avg_mod.approximant_gap(sys, driver, _X0, cfg["eps_grid"], cfg["t0"],
                                  cfg["ensemble"], cfg["p_list"], seed,
                                  substeps=cfg["substeps"], mapper=mapper)
    outs = []
    for tag, fname in (("final", "gap.csv"), ("sup", "gap_sup.csv")):
        block = res[tag]
        rows = [(st.epsilon, st.samples, p, st.lp_values[p])
                for st in block.stats for p in sorted(st.lp_values)]
        outs.append(_write_csv(os.path.join(outdir, fname),
                               ("epsilon", "ensemble", "p", "lp_value"), rows))
        regs = [(p, block.fits[p].slope, block.fits[p].stderr, block.fits[p].r2)
                for p in sorted(block.fits)]
        outs.append(_write_csv(os.path.join(outdir, f"regression_{tag}.csv"),
                               ("p", "slope", "stderr", "r2"), regs))
    summary = {"ok": True,
               "final_slopes": {str(p): res["final"].fits[p].slope
                                for p in res["final"].fits},
               "sup_slopes": {str(p): res["sup"].fits[p].slope
                              for p in res["sup"].fits}}
    return outs, summary


def _exp_special_flow(cfg, mapper, outdir):
    flow_sys = presets.default_flow_system(cfg["roof_amplitude"])
    f = presets.default_flow_field()
    eps_list, gaps, fit = sf_mod.remark_gap_experiment(
        f, flow_sys, _X0, cfg["eps_grid"], cfg["n_omegas"], cfg["t0"],
        cfg["seed"], substeps=max(8, cfg["substeps"] // 2))
    outs = [_write_csv(os.path.join(outdir, "gap.csv"), ("epsilon", "sup_gap"),
                       list(zip(eps_list, gaps)))]
    outs.append(_write_csv(os.path.join(outdir, "regression.csv"),
                           ("slope", "stderr", "r2"),
                           [(fit.slope, fit.stderr, fit.r2)]))
    return outs, {"ok": True, "slope": fit.slope, "r2": fit.r2}


EXPERIMENTS = {
    "metric-selftest": _exp_metric_selftest,
    "clt-rate": _exp_clt_rate,
    "coboundary": _exp_coboundary,
    "decorrelation": _exp_decorrelation,
    "averaging-rate": _exp_averaging_rate,
    "lp-scaling": _exp_lp_scaling,
    "approximant-gap": _exp_approximant_gap,
    "special-flow": _exp_special_flow,
}


def list_experiments():
    return sorted(EXPERIMENTS)


_PLOT_TEMPLATE = '''#!/usr/bin/env python3
"""Self-contained log-log plot script for the CSVs in this directory."""
import csv
import os

HERE = os.path.dirname(os.path.abspath(__file__))
FILES = {files!r}
XCOLS = ("n", "epsilon", "lag")
YCOLS = ("pi_hat", "lp_value", "sup_gap", "cov_norm", "var_times_n")


def load(name):
    with open(os.path.join(HERE, name), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def main():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    for name in FILES:
        rows = load(name)
        if not rows:
            continue
        cols = rows[0].keys()
        xcol = next((c for c in XCOLS if c in cols), None)
        ycol = next((c for c in YCOLS if c in cols), None)
        if xcol is None or ycol is None:
            continue
        fig, ax = plt.subplots()
        if "p" in cols:
            groups = sorted(set(r["p"] for r in rows))
            for g in groups:
                xs = [float(r[xcol]) for r in rows if r["p"] == g]
                ys = [float(r[ycol]) for r in rows if r["p"] == g]
                ax.loglog(xs, ys, "o-", label=f"p={{g}}")
            ax.legend()
        else:
            xs = [float(r[xcol]) for r in rows]
            ys = [max(float(r[ycol]), 1e-300) for r in rows]
            ax.loglog(xs, ys, "o-")
        ax.set_xlabel(xcol)
        ax.set_ylabel(ycol)
        ax.set_title(name)
        out = os.path.join(HERE, name.replace(".csv", ".png"))
        fig.savefig(out, dpi=120)
        print("wrote", out)


if __name__ == "__main__":
    main()
'''


def _out_root(cfg, out_dir):
    if out_dir:
        return out_dir
    if cfg.get("out"):
        return cfg["out"]
    return os.environ.get("LIMITLAB_OUT", "runs")


def run(cfg: ExperimentConfig, workers: int = 1, out_dir=None,
        use_cache: bool = True) -> RunRecord:
    """Execute one experiment config; returns the (possibly cached) record.

    Identical configs with caching enabled return the earlier record
    without recomputation; partial outputs are removed on failure."""
    if cfg.kind not in EXPERIMENTS:
        raise RunnerError(f"unknown experiment kind {cfg.kind!r}")
    root = _out_root(cfg, out_dir)
    chash = cfg.config_hash(__version__)
    rundir = os.path.join(root, f"{cfg.kind}-{chash[:12]}")
    record_path = os.path.join(rundir, "record.json")
    cache_on = use_cache and cfg.get("cache", "on") != "off"
    if cache_on and os.path.exists(record_path):
        rec = RunRecord.from_json(open(record_path, encoding="utf-8").read())
        if all(os.path.exists(os.path.join(rundir, f)) for f in rec.outputs):
            return rec
    if os.path.exists(rundir):
        shutil.rmtree(rundir)
    os.makedirs(rundir)
    mapper = make_mapper(workers)
    started = time.time()
    try:
        outputs, summary = EXPERIMENTS[cfg.kind](cfg, mapper, rundir)
        with open(os.path.join(rundir, "plot.py"), "w", encoding="utf-8") as fh:
            fh.write(_PLOT_TEMPLATE.format(files=sorted(outputs)))
        outputs = sorted(outputs) + ["plot.py"]
        rec = RunRecord(kind=cfg.kind, config_hash=chash, started=started,
                        finished=time.time(), outputs=outputs, summary=summary)
        with open(record_path, "w", encoding="utf-8") as fh:
            fh.write(rec.to_json())
        return rec
    except Exception as exc:
        shutil.rmtree(rundir, ignore_errors=True)
        raise RunnerError(f"experiment {cfg.kind!r} failed: {exc}") from exc
