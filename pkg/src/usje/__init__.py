"""Solver toolkit for uniformly self-justified equilibria (USJE).

A USJE of a stochastic OLG exchange economy is a temporary-equilibrium
forecast policy that is a certified best uniform (minimax) approximation to
realized equilibrium outcomes on a finite point set, with all on-path
forecast errors bounded by the certified maximum.  The package provides the
discrete minimax fitting engine (built on an internal simplex LP solver),
the polynomial forecast classes, the temporary-equilibrium Newton solver,
time iteration, the simulation-driven exchange loop, and the verification
machinery, plus a CLI (``usje --help``).
"""

__version__ = "0.1.0"

from .basis import BasisSet, BasisTerm, build_basis, design_matrix, evaluate
from .economy import (EndogenousState, OLGEconomy, PolicyTable, ShockProcess,
                      aggregate_endowment, build_example_economy,
                      clamp_forecast, economy_from_config, forecast,
                      transition)
from .equilibrium import (EquilibriumSolver, TemporaryEquilibrium,
                          error_ascent_step, gradient_ascent_step,
                          residual_system, solve_temporary_equilibrium)
from .minimax import (CertificationReport, FitProblem, FitResult,
                      certify_best, chebyshev_fit, hull_contains_zero)
from .simplex import LPResult, solve_lp
from .solver import (PointLedger, USJESolution, draw_shocks, exchange_loop,
                     initialize, simulate, time_iteration)
from .verify import (ErrorTable, VerificationReport, check_property1,
                     check_property2, error_tables, verification_report)

__all__ = [
    "BasisSet", "BasisTerm", "build_basis", "design_matrix", "evaluate",
    "EndogenousState", "OLGEconomy", "PolicyTable", "ShockProcess",
    "aggregate_endowment", "build_example_economy", "clamp_forecast",
    "economy_from_config", "forecast", "transition",
    "EquilibriumSolver", "TemporaryEquilibrium", "error_ascent_step",
    "gradient_ascent_step", "residual_system", "solve_temporary_equilibrium",
    "CertificationReport", "FitProblem", "FitResult", "certify_best",
    "chebyshev_fit", "hull_contains_zero",
    "LPResult", "solve_lp",
    "PointLedger", "USJESolution", "draw_shocks", "exchange_loop",
    "initialize", "simulate", "time_iteration",
    "ErrorTable", "VerificationReport", "check_property1", "check_property2",
    "error_tables", "verification_report",
    "__version__",
]
