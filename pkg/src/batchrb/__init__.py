"""Batch greedy reduced basis method for affinely parameterized elliptic problems.

Modules
-------
fem
    Thermal-block full-order model: mesh, affine assembly, sparse solves.
rb
    Reduced basis container, orthonormal extension, Galerkin reduction.
estimator
    Residual-based a posteriori error estimation (offline/online split).
greedy
    Weak batch greedy and strong greedy drivers with tracing.
theory
    Convergence-theory checkers: projection widths, decay fits, bounds.
bench
    Experiment harness, break-even analysis, CSV/JSON reporting.
"""

from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    GreedyError,
    InsufficientDataError,
    NumericError,
)
from .fem import AffineSystem, Mesh, ParameterPoint, Snapshot, assemble, build_mesh, solve_fom

__version__ = "0.1.0"

__all__ = [
    "AffineSystem",
    "Mesh",
    "ParameterPoint",
    "Snapshot",
    "assemble",
    "build_mesh",
    "solve_fom",
    "ConfigurationError",
    "DimensionError",
    "DomainError",
    "GreedyError",
    "InsufficientDataError",
    "NumericError",
    "__version__",
]
