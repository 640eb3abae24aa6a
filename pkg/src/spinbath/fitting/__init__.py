"""Least-squares engine and the named extraction pipelines."""
from .lm import Objective, Tolerances, least_squares, multistart
from .pipelines import (
    CouplingEstimate,
    CouplingStrengthFit,
    DeerEchoFit,
    DensityEstimate,
    DepthRequiredError,
    NonIdentifiableWarning,
    StretchedExpFit,
    T2Estimate,
    extract_coupling_strength,
    extract_density_and_tauc,
    extract_t2,
)

__all__ = [
    "Objective",
    "Tolerances",
    "least_squares",
    "multistart",
    "CouplingEstimate",
    "CouplingStrengthFit",
    "DeerEchoFit",
    "DensityEstimate",
    "DepthRequiredError",
    "NonIdentifiableWarning",
    "StretchedExpFit",
    "T2Estimate",
    "extract_coupling_strength",
    "extract_density_and_tauc",
    "extract_t2",
]
