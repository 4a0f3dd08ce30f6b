"""Numerical laboratory for the Wright--Fisher diffusion with selection and mutation."""

from .errors import (
    DivergenceError,
    NumericalError,
    ParameterError,
    QuadratureBudgetExceeded,
    WFLabError,
)
from .model import WFParams, WF_SPEC

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "NumericalError",
    "ParameterError",
    "QuadratureBudgetExceeded",
    "WFLabError",
    "WFParams",
    "WF_SPEC",
]
