"""Fractional heat operator toolkit: three evaluation routes, the weighted extension problem,
and boundary-quotient experiments in Lipschitz slab cylinders."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Cylinder,
    DomainError,
    Field,
    FracParams,
    NumericalError,
    RouteReport,
    ShapeError,
    SpaceTimeGrid,
    make_params,
    norms,
    parabolic_rescale,
)
from .fracop import apply_extension_route, apply_singular, apply_spectral, consistency_report  # noqa: E402
from .kernels import eval_Gamma, eval_W, kernel_mass  # noqa: E402

__all__ = [
    "__version__",
    "Cylinder",
    "DomainError",
    "Field",
    "FracParams",
    "NumericalError",
    "RouteReport",
    "ShapeError",
    "SpaceTimeGrid",
    "make_params",
    "norms",
    "parabolic_rescale",
    "apply_spectral",
    "apply_singular",
    "apply_extension_route",
    "consistency_report",
    "eval_W",
    "eval_Gamma",
    "kernel_mass",
]
