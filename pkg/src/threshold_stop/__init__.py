"""Threshold rules for optimal stopping of one-dimensional diffusions.

Given a diffusion on an interval, a payoff, and a discount rate, the
package decides whether an optimal stopping rule is a threshold rule,
finds the threshold, solves and classifies the associated free-boundary
problem, certifies optimality over all stopping times, and validates the
answers with an independent Monte Carlo simulation.
"""

__version__ = "0.1.0"

from .diffusion import (DiffusionSpec, FundamentalPair, NumericalFailureError,
                        ShootingFailureError, UnsupportedConfigurationError,
                        default_grid, fundamental_pair, generator_apply,
                        left_end_condition)
from .expr import (DomainError, Expression, FormulaError, PiecewiseFunction,
                   differentiate, evaluate, parse)
from .freeboundary import (FBSolution, OptimalityCertificate, TailCheck,
                           certify_linear_payoff, certify_optimality,
                           classify_second_order, monotone_tail_check, solve_fb)
from .mc import McConfig, McEstimate, simulate_threshold_value, sweep_thresholds
from .specfile import ProblemSpec, SpecValidationError, load_problem, loads_problem
from .threshold import (DegenerateBracketError, HMaximum,
                        LeftEndNotEstablishedError, PastingResult,
                        ThresholdAnalysis, ThresholdClassOptimality,
                        ThresholdFunction, Verdict, analyze_threshold,
                        build_threshold_function, check_threshold_optimality, maximize_h,
                        smooth_pasting_check, two_sided_value, value_threshold)
from .cli import examples_dir, run_analyze, run_mc, run_plotdata

__all__ = [
    "__version__",
    "DiffusionSpec", "FundamentalPair", "NumericalFailureError",
    "ShootingFailureError", "UnsupportedConfigurationError", "default_grid",
    "fundamental_pair", "generator_apply", "left_end_condition",
    "DomainError", "Expression", "FormulaError", "PiecewiseFunction",
    "differentiate", "evaluate", "parse",
    "FBSolution", "OptimalityCertificate", "TailCheck",
    "certify_linear_payoff", "certify_optimality", "classify_second_order",
    "monotone_tail_check", "solve_fb",
    "McConfig", "McEstimate", "simulate_threshold_value", "sweep_thresholds",
    "ProblemSpec", "SpecValidationError", "load_problem", "loads_problem",
    "DegenerateBracketError", "HMaximum", "LeftEndNotEstablishedError",
    "PastingResult", "ThresholdAnalysis", "ThresholdClassOptimality",
    "ThresholdFunction", "Verdict", "analyze_threshold",
    "build_threshold_function", "check_threshold_optimality", "maximize_h",
    "smooth_pasting_check", "two_sided_value", "value_threshold",
    "examples_dir", "run_analyze", "run_mc", "run_plotdata",
]
