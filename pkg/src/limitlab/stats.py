"""Regression summaries shared by the rate experiments."""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["RateFit", "fit_line", "fit_loglog"]


@dataclass
class RateFit:
    """Ordinary least squares summary for a measured decay exponent."""

    slope: float
    intercept: float
    stderr: float
    r2: float
    points: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) < 3:
            raise ValueError("a rate fit needs at least 3 points")


def fit_line(x, y):
    """OLS of y on x; returns (slope, intercept, stderr_of_slope, r2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    xbar, ybar = x.mean(), y.mean()
    sxx = np.sum((x - xbar) ** 2)
    if sxx <= 0:
        raise ValueError("degenerate abscissae")
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    sse = float(np.sum(resid ** 2))
    sst = float(np.sum((y - ybar) ** 2))
    dof = max(n - 2, 1)
    stderr = float(np.sqrt(sse / dof / sxx))
    r2 = 1.0 if sst == 0 else float(np.clip(1.0 - sse / sst, 0.0, 1.0))
    return slope, intercept, stderr, r2


def fit_loglog(sizes, values, floor=None):
    """RateFit of log(values) against log(sizes), flooring values first."""
    sizes = np.asarray(sizes, dtype=float)
    values = np.asarray(values, dtype=float)
    if floor is not None:
        values = np.maximum(values, floor)
    if np.any(values <= 0) or np.any(sizes <= 0):
        raise ValueError("log-log fit needs positive data (set a floor)")
    lx, ly = np.log(sizes), np.log(values)
    slope, intercept, stderr, r2 = fit_line(lx, ly)
    return RateFit(slope, intercept, stderr, r2, points=list(zip(lx.tolist(), ly.tolist())))
