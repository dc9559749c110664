"""Executable checks of the two defining properties of a solution.

Property 1: each stored forecast is a best uniform approximation to its
ledger points, certified through the extreme-point condition; refitting must
reproduce the stored worst-case residual.

Property 2: along a long fresh simulation, no date's forecast error may
exceed the maximum error recorded for its (target, shock) slot.  The check is
a sampled necessary condition (the property quantifies over every reachable
state), run by default for 100*n periods.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .basis import design_matrix
from .economy import OLGEconomy
from .equilibrium import EquilibriumSolver
from .errors import InvalidSpec
from .minimax import FitProblem, certify_best, chebyshev_fit
from .solver import ERROR_FLOOR, USJESolution, draw_shocks, simulate

logger = logging.getLogger("usje.verify")

GAP_TOL = 1e-10


@dataclass
class ErrorTable:
    """Per-(target, shock) forecast-error statistics along a simulated path."""

    values: np.ndarray  # (Y, Z), consumption units
    kind: str           # "max" or "average"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values < 0):
            raise InvalidSpec("error-table entries must be nonnegative")

    def to_dict(self):
        return {"values": self.values.tolist(), "kind": self.kind,
                "metadata": self.metadata}


@dataclass
class VerificationReport:
    """Outcome of both property checks plus the point-proximity statistic."""

    property1_residual_gap: np.ndarray   # (Y, Z)
    property1_certified: np.ndarray      # (Y, Z) bool
    property2_violations: list           # dicts: date, k, z, error, maxerr
    proximity: float
    message: str = ""

    @property
    def property1_passed(self):
        return bool(np.all(self.property1_residual_gap <= GAP_TOL)
                    and np.all(self.property1_certified))

    @property
    def property2_passed(self):
        return not self.property2_violations

    @property
    def passed(self):
        return self.property1_passed and self.property2_passed

    def to_dict(self):
        return {
            "property1_residual_gap": self.property1_residual_gap.tolist(),
            "property1_certified": self.property1_certified.tolist(),
            "property1_passed": self.property1_passed,
            "property2_violations": self.property2_violations,
            "property2_passed": self.property2_passed,
            "proximity": self.proximity,
            "passed": self.passed,
            "message": self.message,
        }


def check_property1(solution: USJESolution):
    """Refit every ledger slot and certify the stored coefficients.

    Returns (residual gaps, certified flags), both (Y, Z).
    """
    policy = solution.policy
    ledger = solution.ledger
    y_count, z_count = ledger.n_targets, ledger.n_shocks
    gaps = np.zeros((y_count, z_count))
    certified = np.zeros((y_count, z_count), dtype=bool)
    for k in range(y_count):
        feats_basis = policy.bases[k]
        for z in range(z_count):
            slot = ledger.slots[k][z]
            problem = FitProblem(design_matrix(feats_basis, slot.points),
                                 slot.targets)
            refit = chebyshev_fit(problem)
            stored = float(solution.fit_residuals[k, z])
            gaps[k, z] = abs(refit.residual - stored)
            certified[k, z] = certify_best(
                problem, policy.coefficients[k][z]).certified
    return gaps, certified


def _error_path(solution: USJESolution, economy: OLGEconomy, m_check, seed):
    """Simulate m_check periods from the solve's final state; per-date errors."""
    if m_check < 1:
        raise InvalidSpec("need m_check >= 1")
    start = np.array(solution.diagnostics.get("final_state",
                                              [0.0] * economy.state_dim))
    z0 = solution.diagnostics.get("final_shock")
    shocks = draw_shocks(economy.shocks, m_check, seed, z0=z0)
    solver = EquilibriumSolver(economy, solution.policy)
    path = simulate(economy, solution.policy, start, shocks, solver=solver)
    states = np.array([rec.state.holdings for rec in path])
    zs = np.array([rec.z for rec in path], dtype=np.int64)
    cons = np.array([rec.equilibrium.consumption for rec in path])
    fvals = solver.packs.forecasts(states)        # (m, Y, Z)
    rows = np.arange(len(path))
    errs = np.abs(cons[:, 1:] - fvals[rows, :, zs])  # (m, Y)
    return states, zs, errs


def check_property2(solution: USJESolution, economy: OLGEconomy, m_check, seed):
    """Hunt for dates whose forecast error exceeds the recorded slot maximum.

    Returns (violations, message); an empty list is a pass.  Errors at solver
    noise level (<= ERROR_FLOOR) never count.
    """
    _, zs, errs = _error_path(solution, economy, m_check, seed)
    maxerr = solution.ledger.maxerr_matrix()
    bound = np.maximum(maxerr[:, zs].T, ERROR_FLOOR)  # (m, Y)
    bad = np.argwhere(errs > bound)
    violations = [{"date": int(t), "k": int(k), "z": int(zs[t]),
                   "error": float(errs[t, k]),
                   "maxerr": float(maxerr[k, zs[t]])}
                  for t, k in bad]
    message = ""
    if violations:
        message = (f"{len(violations)} dates exceed the recorded maxima; "
                   "rerun the exchange loop with a larger m or a larger eta "
                   "(a wider search for high-error points)")
        logger.warning(message)
    return violations, message


def error_tables(solution: USJESolution, economy: OLGEconomy, m_check, seed):
    """Max and average forecast-error tables along the verification path.

    Rows are forecast targets in age order (ages 2..A), columns shock states.
    Values are in consumption units; CSV emission rescales to 1e-2 units.
    """
    _, zs, errs = _error_path(solution, economy, m_check, seed)
    return _tables_from_path(solution, economy, zs, errs, m_check, seed)


def _tables_from_path(solution, economy, zs, errs, m_check, seed):
    y_count, z_count = errs.shape[1], economy.n_states
    vmax = np.zeros((y_count, z_count))
    vsum = np.zeros((y_count, z_count))
    count = np.zeros(z_count)
    for z in range(z_count):
        mask = zs == z
        count[z] = mask.sum()
        if count[z]:
            vmax[:, z] = errs[mask].max(axis=0)
            vsum[:, z] = errs[mask].sum(axis=0)
    avg = np.divide(vsum, np.maximum(count, 1)[None, :])
    meta = {"basis": solution.diagnostics.get("basis_spec"),
            "n": solution.diagnostics.get("n"),
            "m": int(m_check),
            "seed": int(seed) if isinstance(seed, (int, np.integer)) else None}
    return (ErrorTable(vmax, "max", dict(meta)),
            ErrorTable(avg, "average", dict(meta)))


def verification_report(solution: USJESolution, economy: OLGEconomy, m_check,
                        seed):
    """Run both property checks and the error tables on one shared path.

    Returns (VerificationReport, (max_table, average_table)).
    """
    gaps, certified = check_property1(solution)
    states, zs, errs = _error_path(solution, economy, m_check, seed)
    maxerr = solution.ledger.maxerr_matrix()
    bound = np.maximum(maxerr[:, zs].T, ERROR_FLOOR)
    bad = np.argwhere(errs > bound)
    violations = [{"date": int(t), "k": int(k), "z": int(zs[t]),
                   "error": float(errs[t, k]),
                   "maxerr": float(maxerr[k, zs[t]])}
                  for t, k in bad]
    message = ""
    if violations:
        message = (f"{len(violations)} dates exceed the recorded maxima; "
                   "rerun the exchange loop with a larger m or a larger eta")
    tables = _tables_from_path(solution, economy, zs, errs, m_check, seed)
    proximity = _proximity(solution, states)
    report = VerificationReport(gaps, certified, violations, proximity, message)
    return report, tables


def _proximity(solution: USJESolution, visited, chunk=512):
    """max over ledger points of the distance to the nearest visited state."""
    if visited.shape[1] == 0:
        return 0.0
    pts = np.vstack([slot.points for row in solution.ledger.slots for slot in row])
    worst = 0.0
    v2 = np.einsum("ij,ij->i", visited, visited)
    for i in range(0, pts.shape[0], chunk):
        block = pts[i:i + chunk]
        d2 = (np.einsum("ij,ij->i", block, block)[:, None]
              - 2.0 * block @ visited.T + v2[None, :])
        worst = max(worst, float(np.sqrt(np.maximum(d2.min(axis=1), 0.0)).max()))
    return worst


def write_error_table_csv(table: ErrorTable, path):
    """Emit one table as CSV in 1e-2 units, rows ordered by target age."""
    values = table.values * 100.0
    y_count, z_count = values.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_age"] + [f"state_{z + 1}" for z in range(z_count)])
        for k in range(y_count):
            writer.writerow([k + 2] + [f"{v:.6e}" for v in values[k]])
