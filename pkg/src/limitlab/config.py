"""Experiment configuration: flat key = value files with [section] headers.

Sections are cosmetic grouping only; keys live in one flat namespace.
Validation collects every problem instead of stopping at the first, and
unknown keys come back with the nearest valid name.
"""

import difflib
import hashlib
import json
from dataclasses import dataclass, field

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "EXPERIMENT_KINDS"]

EXPERIMENT_KINDS = (
    "metric-selftest",
    "clt-rate",
    "coboundary",
    "decorrelation",
    "averaging-rate",
    "lp-scaling",
    "approximant-gap",
    "special-flow",
)

# key -> (type tag, default); None default means kind-dependent or unset
_SCHEMA = {
    "kind": ("str", None),
    "seed": ("int", None),
    "out": ("str", None),
    "driver": ("str", "cat"),
    "matrix": ("ints", (2, 1, 1, 1)),
    "observable": ("str", "default"),
    "observable_g": ("str", None),
    "system": ("str", "default"),
    "n_grid": ("ints", (16, 32, 64, 128, 256, 512, 1024)),
    "eps_grid": ("floats", (2**-4, 2**-5, 2**-6, 2**-7, 2**-8, 2**-9)),
    "ensemble": ("int", 2000),
    "gaussian_m": ("int", 200_000),
    "mc_samples": ("int", 200_000),
    "lag_cap": ("int", 40),
    "p_list": ("ints", (2, 4)),
    "tol": ("float", 2e-3),
    "t0": ("float", 1.0),
    "s_time": ("float", 1.0),
    "substeps": ("int", 16),
    "n_max": ("int", 12),
    "n_omegas": ("int", 64),
    "sigma_cells": ("int", 64),
    "direct_m": ("int", 5000),
    "sigma_check": ("ints", ()),
    "sigma_check_m": ("ints", ()),
    "cov_check_n": ("int", 0),
    "cov_check_samples": ("int", 100_000),
    "oracle_pairs": ("int", 500),
    "sandwich_pairs": ("int", 1000),
    "coupling_pairs": ("int", 200),
    "couplings_per_pair": ("int", 20),
    "gronwall": ("str", "off"),
    "roof_amplitude": ("float", 0.3),
    "cache": ("str", "on"),
}

_REQUIRED = ("kind", "seed")

_GRID_KEYS = {"n_grid", "eps_grid", "p_list", "sigma_check", "matrix"}


class ConfigError(ValueError):
    """Carries the full list of configuration problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(eq=False)
class ExperimentConfig:
    kind: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def canonical(self):
        """Stable serialized form used for hashing and caching."""
        def norm(v):
            if isinstance(v, float):
                return repr(v)
            if isinstance(v, tuple):
                return [norm(x) for x in v]
            return v
        payload = {k: norm(v) for k, v in sorted(self.values.items()) if v is not None}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self, version):
        blob = f"{version}|{self.canonical()}".encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _parse_scalar(tag, raw):
    if tag == "str":
        return raw
    if tag == "int":
        return int(raw)
    if tag == "float":
        return float(_eval_number(raw))
    if tag == "ints":
        return tuple(int(tok) for tok in raw.split())
    if tag == "floats":
        return tuple(float(_eval_number(tok)) for tok in raw.split())
    raise AssertionError(tag)


def _eval_number(tok):
    """Plain floats plus the power shorthand 2^-4."""
    if "^" in tok:
        base, expo = tok.split("^", 1)
        return float(base) ** float(expo)
    return float(tok)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigError listing every problem."""
    errors = []
    raw = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue                      # section headers are cosmetic
        if "=" not in stripped:
            errors.append(f"line {ln}: expected key = value, got {stripped!r}")
            continue
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            hint = difflib.get_close_matches(key, _SCHEMA.keys(), n=1)
            extra = f" (did you mean {hint[0]!r}?)" if hint else ""
            errors.append(f"line {ln}: unknown key {key!r}{extra}")
            continue
        if key in raw:
            errors.append(f"line {ln}: duplicate key {key!r}")
            continue
        raw[key] = (ln, val)

    values = {}
    for key, (tag, default) in _SCHEMA.items():
        if key in raw:
            ln, val = raw[key]
            try:
                values[key] = _parse_scalar(tag, val)
            except ValueError:
                errors.append(f"line {ln}: malformed value for {key!r}: {val!r}")
        elif default is not None:
            values[key] = default

    for key in _REQUIRED:
        if key not in values:
            errors.append(f"{key} is required")

    kind = values.get("kind")
    if kind is not None and kind not in EXPERIMENT_KINDS:
        hint = difflib.get_close_matches(kind, EXPERIMENT_KINDS, n=1)
        extra = f" (did you mean {hint[0]!r}?)" if hint else ""
        errors.append(f"unknown experiment kind {kind!r}{extra}")

    for key in ("ensemble", "gaussian_m", "mc_samples", "substeps", "n_omegas",
                "sigma_cells", "direct_m", "cov_check_samples", "oracle_pairs",
                "sandwich_pairs", "coupling_pairs", "couplings_per_pair", "n_max"):
        if key in values and values[key] <= 0 and not (key == "cov_check_n"):
            errors.append(f"{key} must be positive, got {values[key]}")
    for key in ("tol", "t0", "s_time"):
        if key in values and not (values[key] > 0):
            errors.append(f"{key} must be positive, got {values[key]}")

    ng = values.get("n_grid", ())
    if ng and (len(ng) < 3 or any(b <= a for a, b in zip(ng, ng[1:])) or ng[0] < 1):
        errors.append(f"n_grid must be strictly increasing positive counts with >= 3 entries, got {ng}")
    eg = values.get("eps_grid", ())
    if eg and (len(eg) < 3 or any(b >= a for a, b in zip(eg, eg[1:])) or eg[-1] <= 0):
        errors.append(f"eps_grid must be strictly decreasing positive reals with >= 3 entries, got {eg}")
    if values.get("substeps", 2) % 2:
        errors.append("substeps must be even")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(kind=kind, values=values)
