"""Discrete best-uniform (L-infinity) approximation by linear basis expansions.

Given samples (x^i, y^i) and features psi(x^i), find coefficients alpha
minimizing max_i |y^i - psi(x^i) @ alpha|.  The problem is the linear program

    min_{alpha, w >= 0} w   s.t.   +-(y_i - psi_i @ alpha) <= w,

solved here through its dual (D+1 rows instead of 2N, which is much faster for
the repeated fits in the equilibrium solver), with the coefficients recovered
from complementary slackness.  Optimality is certified by the extreme-point
condition: the optimum is characterized by a set of maximal-residual samples
whose sign-weighted feature rows contain zero in their convex hull.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBasis, LPError, NumericalFailure
from .simplex import solve_lp

# default certification tolerances; see CertificationReport
DEFAULT_TOL_HULL = 1e-8


def _default_tol_extreme(residual):
    return 1e-8 * max(1.0, residual)


@dataclass
class FitProblem:
    """Sample features (N x D) and targets (N,) for a minimax fit."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError("need at least one sample and one feature")
        if self.targets.size != n:
            raise ValueError("targets length does not match feature rows")
        if not np.isfinite(self.features).all() or not np.isfinite(self.targets).all():
            raise ValueError("features and targets must be finite")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass
class FitResult:
    """Minimax coefficients, worst-case residual, and extreme-point certificate."""

    coefficients: np.ndarray
    residual: float
    extreme_indices: list[int]
    extreme_signs: list[int]


@dataclass
class CertificationReport:
    """Outcome of the extreme-point optimality check.

    certified holds iff at least two samples attain the maximal residual
    (within tol_extreme) and zero lies within tol_hull of the convex hull of
    their sign-weighted feature rows.  hull weights are reported for the
    extreme rows in index order.
    """

    certified: bool
    extreme_count: int
    hull_gap: float
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


def hull_contains_zero(vectors, tol):
    """Test 0 in convexhull(vectors) as an LP feasibility problem.

    Minimizes t subject to |sum_j lambda_j v_j|_inf <= t, lambda >= 0,
    sum lambda = 1.  Returns (contained, gap, weights) where gap is the
    minimized violation t*.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    if v.size == 0 or v.shape[0] == 0:
        return False, np.inf, np.zeros(0)
    n, d = v.shape
    # variables: (lambda_1..lambda_n, t)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_ub = np.zeros((2 * d, n + 1))
    a_ub[:d, :n] = v.T
    a_ub[d:, :n] = -v.T
    a_ub[:, -1] = -1.0
    b_ub = np.zeros(2 * d)
    a_eq = np.zeros((1, n + 1))
    a_eq[0, :n] = 1.0
    res = solve_lp(c, a_ub=a_ub, b_ub=b_ub, a_eq=a_eq, b_eq=[1.0])
    gap = float(res.fun)
    return gap <= tol, gap, res.x[:n]


def _recover_from_dual(problem, w, u, v, weight_tol):
    """Coefficients from the tight constraints identified by the dual weights."""
    f, y = problem.features, problem.targets
    pos_u = u > weight_tol
    pos_v = v > weight_tol
    lhs = np.vstack([f[pos_u], f[pos_v]])
    rhs = np.concatenate([y[pos_u] - w, y[pos_v] + w])
    if lhs.shape[0] == 0:
        return None
    alpha, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return alpha


def _fit_primal(problem):
    """Direct primal formulation: variables (alpha+, alpha-, w) >= 0."""
    f, y = problem.features, problem.targets
    n, d = f.shape
    nv = 2 * d + 1
    c = np.zeros(nv)
    c[-1] = 1.0
    a_ub = np.zeros((2 * n, nv))
    a_ub[:n, :d] = -f
    a_ub[:n, d:2 * d] = f
    a_ub[n:, :d] = f
    a_ub[n:, d:2 * d] = -f
    a_ub[:, -1] = -1.0
    b_ub = np.concatenate([-y, y])
    res = solve_lp(c, a_ub=a_ub, b_ub=b_ub)
    alpha = res.x[:d] - res.x[d:2 * d]
    return alpha, float(res.x[-1])


def chebyshev_fit(problem: FitProblem, tol_extreme=None) -> FitResult:
    """Best uniform approximation of the samples within the feature span.

    Solves the minimax LP and returns coefficients, the optimal worst-case
    residual, and the samples attaining it (with residual signs).  Raises
    NumericalFailure if the internal LP solver cannot recover a consistent
    primal solution.
    """
    f, y = problem.features, problem.targets
    n, d = f.shape
    scale = max(1.0, float(np.max(np.abs(y))), float(np.max(np.abs(f))))

    # dual: max y@(u - v) s.t. f.T@(u - v) = 0, sum(u + v) <= 1, u, v >= 0
    c = np.concatenate([-y, y])
    a_eq = np.hstack([f.T, -f.T])
    b_eq = np.zeros(d)
    a_ub = np.ones((1, 2 * n))
    try:
        res = solve_lp(c, a_ub=a_ub, b_ub=[1.0], a_eq=a_eq, b_eq=b_eq)
    except LPError as exc:  # the dual is always feasible (u = v = 0)
        raise NumericalFailure(f"fitting LP failed: {exc}") from exc
    w = -res.fun
    u, v = res.x[:n], res.x[n:]

    if w <= 1e-12 * scale:
        # interpolation attains residual ~0; minimum-norm interpolant
        alpha, *_ = np.linalg.lstsq(f, y, rcond=None)
        w = 0.0
    else:
        alpha = _recover_from_dual(problem, w, u, v, weight_tol=1e-10)
        ok = alpha is not None
        if ok:
            check = float(np.max(np.abs(y - f @ alpha)))
            ok = check <= w + 1e-7 * scale
        if not ok:
            # degenerate dual basis: fall back to the direct primal LP
            try:
                alpha, w = _fit_primal(problem)
            except LPError as exc:
                raise NumericalFailure(f"fitting LP failed: {exc}") from exc
            check = float(np.max(np.abs(y - f @ alpha)))
            if check > w + 1e-6 * scale:
                raise NumericalFailure(
                    f"primal recovery inconsistent: max residual {check:.3e} "
                    f"vs LP optimum {w:.3e}")

    r = y - f @ alpha
    residual = float(np.max(np.abs(r)))
    tol = tol_extreme if tol_extreme is not None else _default_tol_extreme(residual)
    extreme = np.where(np.abs(r) >= residual - tol)[0]
    signs = [1 if r[i] >= 0 else -1 for i in extreme]
    return FitResult(np.asarray(alpha, dtype=float), residual,
                     [int(i) for i in extreme], signs)


def certify_best(problem: FitProblem, coefficients, tol_extreme=None,
                 tol_hull=DEFAULT_TOL_HULL) -> CertificationReport:
    """Check the extreme-point optimality condition for given coefficients.

    Collects all samples within tol_extreme of the maximal absolute residual,
    forms their sign-weighted feature rows, and certifies iff zero lies in the
    convex hull of that set (and at least two samples are extreme).  Samples
    with residual of ambiguous sign (the zero-residual interpolation case)
    contribute both signed rows, matching the subgradient of |r| at 0.
    """
    f, y = problem.features, problem.targets
    alpha = np.asarray(coefficients, dtype=float).ravel()
    if alpha.size != problem.n_features:
        raise ValueError("coefficient length does not match feature count")
    r = y - f @ alpha
    m = float(np.max(np.abs(r)))
    tol = tol_extreme if tol_extreme is not None else _default_tol_extreme(m)
    extreme = np.where(np.abs(r) >= m - tol)[0]
    if np.linalg.matrix_rank(f[extreme]) == 0:
        warnings.warn("extreme-point feature rows are all zero", DegenerateBasis)

    zero_scale = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    rows = []
    for i in extreme:
        if abs(r[i]) <= zero_scale:
            rows.append(f[i])
            rows.append(-f[i])
        else:
            rows.append(np.sign(r[i]) * f[i])
    contained, gap, lam = hull_contains_zero(np.array(rows), tol_hull)
    certified = bool(contained and extreme.size >= 2)
    return CertificationReport(certified, int(extreme.size), gap, lam)
