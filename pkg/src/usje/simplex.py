"""Dense two-phase primal simplex for the small LPs used throughout the package.

Problems are stated in the computational standard form

    minimize    c @ x
    subject to  a_ub @ x <= b_ub
                a_eq @ x == b_eq
                x >= 0.

Free variables must be split by the caller.  The solver keeps a full tableau
(fine at these sizes: tens of rows, a few hundred columns), prices with
Dantzig's rule, and falls back to Bland's rule once a pivot budget is spent so
that degenerate problems cannot cycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CycleDetected, Infeasible, Unbounded

# Entries smaller than this are treated as zero when choosing pivots.
_PIVOT_TOL = 1e-9
# Reduced costs above -_COST_TOL count as optimal.
_COST_TOL = 1e-9
_FEAS_TOL = 1e-7


@dataclass
class LPResult:
    """Optimal basic solution of a standard-form LP."""

    x: np.ndarray
    fun: float
    status: str
    pivots: int


def _pivot(tableau, row, col):
    piv = tableau[row, col]
    tableau[row] /= piv
    factors = tableau[:, col].copy()
    factors[row] = 0.0
    tableau -= np.outer(factors, tableau[row])
    # kill roundoff in the pivot column so basic columns stay unit vectors
    tableau[:, col] = 0.0
    tableau[row, col] = 1.0


def _run_simplex(tableau, basis, ncols, *, allow, budget, bland_after, start_pivots):
    """Iterate pivots on `tableau` until the objective row is optimal.

    `allow` masks columns eligible to enter (used to lock out artificials in
    phase 2).  Returns the pivot count; raises Unbounded / CycleDetected.
    """
    pivots = start_pivots
    while True:
        obj = tableau[-1, :ncols]
        eligible = np.where(allow & (obj < -_COST_TOL))[0]
        if eligible.size == 0:
            return pivots
        if pivots - start_pivots < bland_after:
            col = eligible[np.argmin(obj[eligible])]
        else:
            col = eligible[0]  # Bland: smallest index enters
        column = tableau[:-1, col]
        rhs = tableau[:-1, -1]
        rows = np.where(column > _PIVOT_TOL)[0]
        if rows.size == 0:
            raise Unbounded("entering column has no positive entries")
        ratios = rhs[rows] / column[rows]
        best = np.min(ratios)
        ties = rows[ratios <= best + _PIVOT_TOL]
        # among ties, drop the basic variable with the smallest index
        row = ties[np.argmin(basis[ties])]
        _pivot(tableau, row, col)
        basis[row] = col
        pivots += 1
        if pivots - start_pivots > budget:
            raise CycleDetected(f"pivot budget {budget} exhausted")


def solve_lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None,
             *, budget=50_000, bland_after=5_000):
    """Solve min c@x s.t. a_ub@x <= b_ub, a_eq@x == b_eq, x >= 0.

    Returns an LPResult with an optimal basic solution.  Raises Infeasible,
    Unbounded, or CycleDetected.
    """
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    blocks, rhs_parts, n_ub = [], [], 0
    if a_ub is not None:
        a_ub = np.atleast_2d(np.asarray(a_ub, dtype=float))
        b_ub = np.asarray(b_ub, dtype=float).ravel()
        if a_ub.shape != (b_ub.size, n):
            raise ValueError("a_ub/b_ub dimensions inconsistent with c")
        blocks.append(a_ub)
        rhs_parts.append(b_ub)
        n_ub = b_ub.size
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
        b_eq = np.asarray(b_eq, dtype=float).ravel()
        if a_eq.shape != (b_eq.size, n):
            raise ValueError("a_eq/b_eq dimensions inconsistent with c")
        blocks.append(a_eq)
        rhs_parts.append(b_eq)
    if not blocks:
        if np.any(c < -_COST_TOL):
            raise Unbounded("negative cost with no constraints")
        return LPResult(np.zeros(n), 0.0, "optimal", 0)

    a = np.vstack(blocks)
    b = np.concatenate(rhs_parts)
    m = b.size

    # slacks for the <= rows, then flip rows to make the rhs nonnegative
    full = np.hstack([a, np.vstack([np.eye(n_ub), np.zeros((m - n_ub, n_ub))])])
    neg = b < 0
    full[neg] *= -1.0
    b = np.abs(b)

    # rows whose slack survived with +1 can start basic; the rest need artificials
    need_art = np.ones(m, dtype=bool)
    basis = np.full(m, -1, dtype=np.int64)
    for i in range(n_ub):
        if not neg[i]:
            basis[i] = n + i
            need_art[i] = False
    art_rows = np.where(need_art)[0]
    n_art = art_rows.size
    ncols = n + n_ub + n_art
    tableau = np.zeros((m + 1, ncols + 1))
    tableau[:m, : n + n_ub] = full
    tableau[:m, -1] = b
    for j, i in enumerate(art_rows):
        tableau[i, n + n_ub + j] = 1.0
        basis[i] = n + n_ub + j

    allow = np.ones(ncols, dtype=bool)
    pivots = 0
    if n_art:
        # phase 1: minimize the sum of artificials
        tableau[-1, :] = 0.0
        tableau[-1, n + n_ub:ncols] = 1.0
        for i in art_rows:
            tableau[-1] -= tableau[i]
        pivots = _run_simplex(tableau, basis, ncols, allow=allow,
                              budget=budget, bland_after=bland_after,
                              start_pivots=0)
        if tableau[-1, -1] < -_FEAS_TOL:
            raise Infeasible(f"phase-1 optimum {-tableau[-1, -1]:.3e} > 0")
        # drive leftover zero-level artificials out of the basis
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n + n_ub:
                row = tableau[i, : n + n_ub]
                cand = np.where(np.abs(row) > _PIVOT_TOL)[0]
                if cand.size:
                    _pivot(tableau, i, cand[0])
                    basis[i] = cand[0]
                else:
                    keep[i] = False  # redundant constraint
        if not keep.all():
            tableau = np.vstack([tableau[:m][keep], tableau[-1:]])
            basis = basis[keep]
            m = int(keep.sum())
        allow[n + n_ub:] = False

    # phase 2: restore the true objective row
    tableau[-1, :] = 0.0
    tableau[-1, :n] = c
    for i in range(m):
        cb = tableau[-1, basis[i]]
        if cb != 0.0:
            tableau[-1] -= cb * tableau[i]
    pivots = _run_simplex(tableau, basis, ncols, allow=allow,
                          budget=budget, bland_after=bland_after,
                          start_pivots=pivots)

    x = np.zeros(ncols)
    x[basis] = tableau[:m, -1]
    x = x[:n]
    return LPResult(x, float(c @ x), "optimal", pivots)
