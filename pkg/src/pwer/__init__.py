"""Population-wise error rate control for overlapping populations."""

from .core import (
    CorrelationModel,
    CriticalValueResult,
    PwerProblem,
    SciResult,
    adjusted_p,
    closed_form_independent_pair,
    coverage_sim,
    fwer_at,
    pwer_at,
    sci_bounds,
    solve_critical,
)
from .estimator import MultipleTest
from .exceptions import SolverError, ValidationError
from .popmodel import (
    PopulationStructure,
    PrevalenceEstimate,
    make_structure,
    nested_structure,
    prevalence_mle,
)

__all__ = [
    "CorrelationModel",
    "CriticalValueResult",
    "MultipleTest",
    "PopulationStructure",
    "PrevalenceEstimate",
    "PwerProblem",
    "SciResult",
    "SolverError",
    "ValidationError",
    "adjusted_p",
    "closed_form_independent_pair",
    "coverage_sim",
    "fwer_at",
    "make_structure",
    "nested_structure",
    "prevalence_mle",
    "pwer_at",
    "sci_bounds",
    "solve_critical",
]
