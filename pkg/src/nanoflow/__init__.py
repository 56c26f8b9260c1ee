"""Nanoparticle transport in a 1-D saturated sand column.

Forward and inverse simulation of aqueous and retained nanoparticle
concentrations with a Bayesian physics-informed neural network, verified
against an implicit finite-difference reference solver.
"""

import os

# BLAS picks its thread count when numpy first loads, so the cap has to
# land before that import. NANOFLOW_THREADS bounds every parallel backend
# we might end up linked against.
_threads = os.environ.get("NANOFLOW_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "BLIS_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, str(int(_threads)))

from nanoflow.domain import ColumnConfig, inlet_concentration, scale_point, validate_config

__all__ = [
    "ColumnConfig",
    "inlet_concentration",
    "scale_point",
    "validate_config",
]
