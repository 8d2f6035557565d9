"""Doubly robust balancing weights for causal panel data.

Population weight sets on finite assignment supports, a sample-level
estimator built on an asymmetric-loss dual program, unit-level bootstrap
inference, and a Monte Carlo harness for bias and coverage experiments.
"""

from drpanel.panel import (
    AssignmentSupport,
    BasisSpec,
    PanelDataset,
    ValidationError,
    WeightTable,
    empirical_support,
    load_panel,
    write_panel,
)
from drpanel.support import (
    ConstraintSystem,
    FeasibilityReport,
    InfeasibleSystemError,
    aggregate_weights,
    build_constraints,
    check_feasibility,
    fe_weights,
    solve_min_norm,
)
from drpanel.stats import (
    SufficientStatistic,
    simulate_markov,
    simulate_static_logit,
    stat_by_name,
    stat_exponential_family,
    stat_markov,
    stat_mean,
    stat_static_logit,
)
from drpanel.estimator import (
    ConvergenceError,
    DualSolution,
    EstimateResult,
    NoOverlapError,
    SolverConfig,
    check_overlap,
    estimate,
    extract_weights,
    fit_dual,
    make_basis,
    rho,
    unit_intercept,
)
from drpanel.inference import (
    BootstrapResult,
    UnstableBootstrapError,
    bootstrap,
    write_bootstrap_csv,
)
from drpanel.mc import DgpSpec, run_experiment

__all__ = [
    "AssignmentSupport",
    "BasisSpec",
    "BootstrapResult",
    "ConstraintSystem",
    "ConvergenceError",
    "DgpSpec",
    "DualSolution",
    "EstimateResult",
    "FeasibilityReport",
    "InfeasibleSystemError",
    "NoOverlapError",
    "PanelDataset",
    "SolverConfig",
    "SufficientStatistic",
    "UnstableBootstrapError",
    "ValidationError",
    "WeightTable",
    "aggregate_weights",
    "bootstrap",
    "build_constraints",
    "check_feasibility",
    "check_overlap",
    "empirical_support",
    "estimate",
    "extract_weights",
    "fe_weights",
    "fit_dual",
    "load_panel",
    "make_basis",
    "rho",
    "run_experiment",
    "simulate_markov",
    "simulate_static_logit",
    "solve_min_norm",
    "stat_by_name",
    "stat_exponential_family",
    "stat_markov",
    "stat_mean",
    "stat_static_logit",
    "unit_intercept",
    "write_bootstrap_csv",
    "write_panel",
]

__version__ = "0.1.0"
