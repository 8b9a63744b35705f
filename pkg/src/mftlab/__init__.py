"""Linear-quadratic mean-field teams with heterogeneous agents.

Consistency-condition solver, well-posedness certificates, finite-population
simulation and equivalence checks.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .cc_solver import CCSolution, ControlField, SolverDiverged, decentralized_control, solve_cc
from .equivalence import (
    SystemsComparison,
    average_discrepancy,
    m3_stacked_check,
    simulate_m_systems,
    simulate_p_systems,
)
from .model import (
    ConstraintSpec,
    DiversityLaw,
    InfoPattern,
    ModelError,
    ModelSpec,
    require_valid,
    validate,
)
from .population import (
    PopulationRun,
    VariationalDiagnostics,
    centralized_oracle,
    frozen_cost_mean,
    gap_rate_verdicts,
    optimality_gap,
    simulate_population,
    variational_diagnostics,
)
from .projections import WeightedProjection, project_batch, project_gamma
from .riccati import solve_reduced_ode
from .stochastics import TimeGrid, make_ensemble
from .wellposedness import (
    ContractionReport,
    check_a4,
    compute_constants,
    contraction_modulus,
    optimize_modulus,
    report_with_modulus,
)
