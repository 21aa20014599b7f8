"""Normalized critical points of mass-constrained semilinear elliptic problems."""

import os

if os.environ.get("NORMCRIT_FP_STRICT") == "1":
    # single-threaded BLAS keeps reductions in a fixed order
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

from .mesh import (  # noqa: E402
    DIRICHLET,
    NEUMANN,
    ROBIN,
    BoundaryMode,
    Box,
    Discretization,
    DomainSpec,
    Interval,
    Rectangle,
    assemble,
    build_domain,
    pohozaev_weights,
)

__version__ = "0.1.0"

__all__ = [
    "DIRICHLET",
    "NEUMANN",
    "ROBIN",
    "BoundaryMode",
    "Box",
    "Discretization",
    "DomainSpec",
    "Interval",
    "Rectangle",
    "assemble",
    "build_domain",
    "pohozaev_weights",
]
