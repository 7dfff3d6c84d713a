"""limitlab: numerical laboratory for Prokhorov-metric rate experiments.

Exact metric computation on finite-support measures, convergence-rate
measurements for normalized ergodic sums of chaotic maps, and the
averaging method for ODEs driven by a measure-preserving system.
"""

__version__ = "0.1.0"

from .dynamics import (IIDTorusDriver, Observable, SpecialFlowSystem,
                       ToralAutomorphism, torus_distance)
from .metrics import (CoupledSample, FiniteMeasure, GaussianSpec,
                      bounded_lipschitz, coupling_kyfan_upper, gaussian_sample,
                      ky_fan, prokhorov, prokhorov_oracle)
from .stats import RateFit

__all__ = [
    "__version__",
    "IIDTorusDriver",
    "Observable",
    "SpecialFlowSystem",
    "ToralAutomorphism",
    "torus_distance",
    "CoupledSample",
    "FiniteMeasure",
    "GaussianSpec",
    "bounded_lipschitz",
    "coupling_kyfan_upper",
    "gaussian_sample",
    "ky_fan",
    "prokhorov",
    "prokhorov_oracle",
    "RateFit",
]
