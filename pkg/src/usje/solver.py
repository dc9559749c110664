"""Uniformly self-justified equilibrium solver.

Two nested procedures produce a USJESolution:

* time iteration on a fixed point set: repeatedly solve the temporary
  equilibrium at every stored point under the current forecast policy, refit
  each forecast by a minimax fit on the realized outcomes, and stop when the
  coefficients settle;

* the exchange loop: simulate the economy, and whenever a date's forecast
  error reaches the largest error recorded for that (target, shock) slot,
  search nearby (one gradient-ascent step with back-tracking) for a point
  with a strictly larger error and swap it into the point set in place of the
  entry with the smallest recorded error.  The loop ends when a full
  simulation sweep exchanges nothing.

The forecast errors certified this way bound the on-path errors seen at any
date of the final sweep, which is the defining property checked by verify.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .basis import BasisSet, build_basis, design_matrix
from .economy import (EndogenousState, OLGEconomy, PolicyTable, forecast,
                      is_valid_state)
from .equilibrium import (EquilibriumSolver, TemporaryEquilibrium, _build_te,
                          _consumption, _newton_batch, error_ascent_step)
from .errors import (InsufficientPoints, InvalidSpec, MaxIterationsExceeded,
                     MaxOuterIterations, NoConvergence)
from .minimax import FitProblem, chebyshev_fit

logger = logging.getLogger("usje.solver")

# Errors at or below solver noise never trigger an exchange and never count
# as a bound violation; genuine forecast errors are orders of magnitude above.
ERROR_FLOOR = 1e-12

_BATCH_CHUNK = 2048


# ---------------------------------------------------------------------------
# ledger and solution containers
# ---------------------------------------------------------------------------

@dataclass
class LedgerSlot:
    """Point set for one (target k, shock z): states, outcomes, recorded errors."""

    points: np.ndarray   # (n, S)
    targets: np.ndarray  # (n,)
    errors: np.ndarray   # (n,)

    @property
    def maxerr(self):
        return float(self.errors.max()) if self.errors.size else 0.0


@dataclass
class PointLedger:
    """Per-(k, z) stored point sets with their recorded exchange errors."""

    slots: list  # slots[k][z] -> LedgerSlot
    n: int

    @property
    def n_targets(self):
        return len(self.slots)

    @property
    def n_shocks(self):
        return len(self.slots[0])

    def maxerr_matrix(self):
        return np.array([[s.maxerr for s in row] for row in self.slots])

    def to_dict(self):
        return {
            "n": self.n,
            "slots": [[{"points": s.points.tolist(),
                        "targets": s.targets.tolist(),
                        "errors": s.errors.tolist()} for s in row]
                      for row in self.slots],
        }

    @staticmethod
    def from_dict(data):
        slots = [[LedgerSlot(np.array(s["points"], dtype=float).reshape(len(s["targets"]), -1),
                             np.array(s["targets"], dtype=float),
                             np.array(s["errors"], dtype=float))
                  for s in row] for row in data["slots"]]
        # zero-width point arrays lose their shape through JSON lists
        for row in slots:
            for s in row:
                if s.points.size == 0:
                    s.points = s.points.reshape(len(s.targets), 0)
        return PointLedger(slots, int(data["n"]))


@dataclass
class USJESolution:
    """Converged policy, its certified point sets, and run diagnostics."""

    policy: PolicyTable
    ledger: PointLedger
    fit_residuals: np.ndarray  # (Y, Z) minimax residuals of the final refit
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "policy": self.policy.to_dict(),
            "ledger": self.ledger.to_dict(),
            "fit_residuals": self.fit_residuals.tolist(),
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_dict(data):
        return USJESolution(PolicyTable.from_dict(data["policy"]),
                            PointLedger.from_dict(data["ledger"]),
                            np.array(data["fit_residuals"], dtype=float),
                            dict(data["diagnostics"]))


class PathRecord(NamedTuple):
    state: EndogenousState
    z: int
    equilibrium: TemporaryEquilibrium


# ---------------------------------------------------------------------------
# shocks and bases
# ---------------------------------------------------------------------------

def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def draw_shocks(process, m, seed, z0=None):
    """Markov-chain shock draw of length m (PCG64 generator, seedable).

    The initial state is drawn from the stationary distribution unless `z0`
    is given, in which case the chain continues from z0 (z0 itself is not
    part of the output).
    """
    rng = _as_rng(seed)
    m = int(m)
    if m < 0:
        raise ValueError("m must be nonnegative")
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    cum = np.cumsum(process.transition, axis=1)
    if z0 is None:
        start_cum = np.cumsum(process.stationary_distribution())
        z = int(np.searchsorted(start_cum, rng.random()))
    else:
        z = int(np.searchsorted(cum[int(z0)], rng.random()))
    out[0] = z
    for t in range(1, m):
        z = int(np.searchsorted(cum[z], rng.random()))
        out[t] = z
    return out


def build_policy_bases(economy: OLGEconomy, basis_spec):
    """One BasisSet per forecast target.

    For the named families the own coordinate of target k is state coordinate
    k; the last target (age-A consumption) uses the implied closing holding.
    A custom term list is shared by every target.
    """
    s = economy.state_dim
    if isinstance(basis_spec, str):
        return [build_basis(basis_spec, s, own_index=min(k, s))
                for k in range(economy.n_targets)]
    custom = build_basis(basis_spec, s)
    return [custom] * economy.n_targets


def _constant_index(basis: BasisSet):
    for i, t in enumerate(basis.terms):
        if t.degree == 0:
            return i
    raise InvalidSpec("initialization needs a constant term in every basis")


def _own_linear_index(basis: BasisSet):
    if basis.own_index is None:
        return None
    want = tuple(1 if i == basis.own_index else 0
                 for i in range(basis.state_dim + 1))
    for i, t in enumerate(basis.terms):
        if t.exponents == want:
            return i
    return None


def autarky_policy(economy: OLGEconomy, bases):
    """The carry-forward seed forecast: endowment plus the bond payoff.

    Each target age a is forecast as e_a(z) + own beginning-of-period
    holding (unit own-linear coefficient where the basis has that term).
    A purely constant forecast would give savings no feedback at all, and
    its temporary equilibria sit at extreme corner trades; the carry-forward
    form is the tame no-retrade benchmark.
    """
    coefs = []
    for k, b in enumerate(bases):
        c = np.zeros((economy.n_states, b.n_terms))
        c[:, _constant_index(b)] = economy.endowments[k + 1]
        own = _own_linear_index(b)
        if own is not None:
            c[:, own] = 1.0
        coefs.append(c)
    return PolicyTable(list(bases), coefs)


# ---------------------------------------------------------------------------
# batched point solving
# ---------------------------------------------------------------------------

def _solve_point_set(solver: EquilibriumSolver, x, zidx, u0, threads=1):
    """Solve many independent states; ladder retries on stragglers."""
    b = x.shape[0]
    chunks = [np.arange(i, min(i + _BATCH_CHUNK, b))
              for i in range(0, b, _BATCH_CHUNK)]

    def run(idx):
        return _newton_batch(solver.packs, x[idx], zidx[idx], u0[idx],
                             tol=solver.tol, max_iter=solver.max_iter)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    u = np.vstack([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    for i in np.where(~ok)[0]:
        u[i], _, _ = solver.solve_unknowns(x[i], int(zidx[i]))
    return u


class _PointPlan:
    """Deduplicated (state, shock) pairs across all ledger slots."""

    def __init__(self, ledger: PointLedger):
        key_to_id = {}
        xs, zs = [], []
        self.slot_ids = []
        for row in ledger.slots:
            ids_row = []
            for z, slot in enumerate(row):
                ids = np.empty(len(slot.targets), dtype=np.int64)
                for i, pt in enumerate(slot.points):
                    key = (z, pt.tobytes())
                    if key not in key_to_id:
                        key_to_id[key] = len(xs)
                        xs.append(pt)
                        zs.append(z)
                    ids[i] = key_to_id[key]
                ids_row.append(ids)
            self.slot_ids.append(ids_row)
        self.keys = list(key_to_id)
        self.x = np.array(xs, dtype=float).reshape(len(xs), -1)
        self.z = np.array(zs, dtype=np.int64)


_RELAX_FLOOR = 1e-3


def _time_iteration_core(economy, ledger, policy0, eps_bar, *, max_sweeps=500,
                         threads=1, warm_map=None, solver=None):
    """Solve-and-refit sweeps until the coefficients settle.

    A full minimax refit can overshoot into policies whose temporary
    equilibria are unsolvable (runaway forecasts), so the policy moves by an
    adaptive relaxation toward each refit: the step halves whenever the next
    sweep's solves fail and doubles back toward a full step on success.  The
    fixed point is unchanged, and the convergence test uses the undamped
    refit difference.

    Returns (policy, per-slot targets, per-slot FitResults, sweeps).  The
    returned policy is exactly the minimax fit of the returned targets, so a
    refit reproduces it.
    """
    if warm_map is None:
        warm_map = {}
    plan = _PointPlan(ledger)
    if solver is None:
        solver = EquilibriumSolver(economy, policy0)
    designs = [[design_matrix(policy0.bases[k], ledger.slots[k][z].points)
                for z in range(ledger.n_shocks)]
               for k in range(ledger.n_targets)]
    u_good = np.vstack([warm_map.get(key) if key in warm_map
                        else _autarky_row(solver, int(z))
                        for key, z in zip(plan.keys, plan.z)])

    def sweep_once(policy, u_start):
        solver.update_policy(policy)
        u = _solve_point_set(solver, plan.x, plan.z, u_start.copy(),
                             threads=threads)
        cons = _consumption(solver.packs, plan.x, plan.z,
                            np.exp(u[:, 0]), u[:, 1:])
        new_coefs, targets, fits = [], [], []
        for k in range(ledger.n_targets):
            row_t, row_f = [], []
            ck = np.zeros((ledger.n_shocks, policy.bases[k].n_terms))
            for z in range(ledger.n_shocks):
                y = cons[plan.slot_ids[k][z], k + 1]
                fit = chebyshev_fit(FitProblem(designs[k][z], y))
                ck[z] = fit.coefficients
                row_t.append(y)
                row_f.append(fit)
            new_coefs.append(ck)
            targets.append(row_t)
            fits.append(row_f)
        return PolicyTable(list(policy.bases), new_coefs), targets, fits, u

    policy, refit, targets, fits = policy0, None, None, None
    relax = 1.0
    sweeps = 0
    while sweeps < max_sweeps:
        if refit is None:
            candidate = policy
        else:
            blend = [c + relax * (r - c) for c, r in
                     zip(policy.coefficients, refit.coefficients)]
            candidate = PolicyTable(list(policy.bases), blend)
        sweeps += 1
        try:
            new_refit, targets, fits, u = sweep_once(candidate, u_good)
        except NoConvergence:
            if refit is None:
                # unsolvable starting policy: approach it from autarky instead
                refit = policy
                policy = autarky_policy(economy, policy.bases)
                relax = 0.5
                logger.debug("start policy unsolvable; blending in from autarky")
                continue
            relax *= 0.5
            logger.debug("sweep %d unsolvable, relaxation now %.4g", sweeps, relax)
            if relax < _RELAX_FLOOR:
                raise
            continue
        u_good = u
        eps = new_refit.max_abs_diff(candidate) / max(1.0, candidate.max_abs())
        policy, refit = candidate, new_refit
        relax = min(1.0, 2.0 * relax)
        if eps < eps_bar:
            for key, uu in zip(plan.keys, u_good):
                warm_map[key] = uu
            solver.update_policy(refit)
            return refit, targets, fits, sweeps
    raise MaxIterationsExceeded(
        f"time iteration did not settle within {max_sweeps} sweeps "
        f"(last relative change {eps:.3e})")


def _autarky_row(solver, z):
    from .equilibrium import _autarky_guess
    return _autarky_guess(solver.packs, z)


def time_iteration(economy: OLGEconomy, points, policy0: PolicyTable,
                   eps_bar, *, max_sweeps=500, threads=1) -> PolicyTable:
    """Refit the policy on a fixed point set until it reproduces itself.

    `points` is a PointLedger or a [k][z] nested list of (n, S) state arrays.
    """
    if not isinstance(points, PointLedger):
        slots = [[LedgerSlot(np.atleast_2d(np.asarray(p, dtype=float)),
                             np.zeros(len(p)), np.zeros(len(p)))
                  for p in row] for row in points]
        points = PointLedger(slots, len(slots[0][0].targets))
    policy, _, _, _ = _time_iteration_core(economy, points, policy0, eps_bar,
                                           max_sweeps=max_sweeps, threads=threads)
    return policy


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

_BURN_JITTER = 0.1


def _initialize_full(economy: OLGEconomy, bases, n, rng, *, burn_factor=3,
                     threads=1):
    max_d = max(b.n_terms for b in bases)
    if n < max_d + 1:
        raise InsufficientPoints(
            f"need at least D+1 = {max_d + 1} points, got n = {n}")
    policy = autarky_policy(economy, bases)
    solver = EquilibriumSolver(economy, policy)
    shocks = draw_shocks(economy.shocks, burn_factor * n, rng)
    s = economy.state_dim
    x = np.zeros(s)
    visited = []
    u_prev = None
    for t, z in enumerate(shocks):
        try:
            u_prev, _, _ = solver.solve_unknowns(x, int(z), warm_start=u_prev)
        except NoConvergence as exc:
            if len(visited) >= n:
                break
            raise InsufficientPoints(
                f"burn-in stalled at date {t} with only {len(visited)} "
                f"solvable states") from exc
        visited.append(x.copy())
        x = u_prev[1:1 + s].copy()
        # exploration noise: the path alone can collapse onto a steady state,
        # leaving a rank-deficient point cloud that the polynomial fits need
        if s:
            noise = _BURN_JITTER * rng.standard_normal(s)
            for _ in range(4):
                if is_valid_state(x + noise, economy):
                    x = x + noise
                    break
                noise *= 0.5
    points = np.array(visited[-n:], dtype=float).reshape(n, s)

    # realized outcomes at every (point, shock) pair under the autarky policy
    z_all = np.repeat(np.arange(economy.n_states), n)
    x_all = np.tile(points, (economy.n_states, 1))
    u0 = np.vstack([_autarky_row(solver, int(z)) for z in z_all])
    u = _solve_point_set(solver, x_all, z_all, u0, threads=threads)
    cons = _consumption(solver.packs, x_all, z_all, np.exp(u[:, 0]), u[:, 1:])

    warm_map = {}
    for key_z, pt, uu in zip(z_all, x_all, u):
        warm_map[(int(key_z), pt.tobytes())] = uu

    slots, coefs = [], []
    for k, b in enumerate(bases):
        feats = design_matrix(b, points)
        row = []
        ck = np.zeros((economy.n_states, b.n_terms))
        for z in range(economy.n_states):
            y = cons[z * n:(z + 1) * n, k + 1]
            fit = chebyshev_fit(FitProblem(feats, y))
            ck[z] = fit.coefficients
            row.append(LedgerSlot(points.copy(), y.copy(), np.zeros(n)))
        slots.append(row)
        coefs.append(ck)
    policy = PolicyTable(list(bases), coefs)
    ledger = PointLedger(slots, n)
    return policy, ledger, x, warm_map


def initialize(economy: OLGEconomy, basis_spec, n, seed):
    """Seed the point ledger and policy from a burn-in simulation.

    Simulates 3n periods under the autarky forecast, keeps the last n visited
    states as the initial points of every (k, z) slot, and fits the initial
    policy to the realized outcomes.  Recorded errors start at zero.
    """
    bases = build_policy_bases(economy, basis_spec)
    policy, ledger, _, _ = _initialize_full(economy, bases, n, _as_rng(seed))
    return policy, ledger


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate(economy: OLGEconomy, policy: PolicyTable, initial_state, shocks,
             solver: EquilibriumSolver | None = None):
    """Solve the temporary equilibrium along a given shock sequence.

    Returns a list of PathRecord(state, z, equilibrium); the path has one
    record per shock.  Each date warm-starts from the previous solution.
    Raises NoConvergence with the failing date attached.
    """
    if solver is None:
        solver = EquilibriumSolver(economy, policy)
    x = initial_state.holdings if isinstance(initial_state, EndogenousState) \
        else np.asarray(initial_state, dtype=float).ravel()
    x = x.copy()
    s = economy.state_dim
    path = []
    u_prev = None
    for t, z in enumerate(np.asarray(shocks, dtype=np.int64).ravel()):
        try:
            u_prev, iters, nrm = solver.solve_unknowns(x, int(z), warm_start=u_prev)
        except NoConvergence as exc:
            exc.date = t
            raise
        te = _build_te(solver.packs, x, int(z), u_prev, iters, nrm)
        path.append(PathRecord(EndogenousState(x.copy()), int(z), te))
        x = u_prev[1:1 + s].copy()
    return path


# ---------------------------------------------------------------------------
# the exchange loop
# ---------------------------------------------------------------------------

def exchange_loop(economy: OLGEconomy, basis_spec, n, m, eta, seed,
                  eps_bar=1e-8, *, max_outer=200, max_sweeps=500,
                  threads=1) -> USJESolution:
    """Alternate simulation-driven point exchanges with time iteration.

    Per outer iteration: draw m shocks, simulate, and whenever a date's
    forecast error for target k reaches that slot's recorded maximum, ascend
    to a strictly-larger-error point within distance eta (falling back to the
    visited point itself) and swap it in for the entry with the smallest
    recorded error.  Refit by time iteration and repeat until a full sweep
    exchanges nothing.
    """
    if m < n:
        raise InvalidSpec("need m >= n")
    if eta <= 0:
        raise InvalidSpec("need eta > 0")
    t_start = time.perf_counter()
    rng = _as_rng(seed)
    bases = build_policy_bases(economy, basis_spec)
    policy, ledger, x_cur, warm_map = _initialize_full(
        economy, bases, n, rng, threads=threads)
    solver = EquilibriumSolver(economy, policy)
    policy, targets, fits, sweeps0 = _time_iteration_core(
        economy, ledger, policy, eps_bar, max_sweeps=max_sweeps,
        threads=threads, warm_map=warm_map, solver=solver)
    _store_targets(ledger, targets)

    y_count = economy.n_targets
    s = economy.state_dim
    maxerr = ledger.maxerr_matrix()
    exchanges_hist = []
    sweeps_hist = [sweeps0]
    z_prev = None
    u_prev = None
    for outer in range(1, max_outer + 1):
        z_seq = draw_shocks(economy.shocks, m, rng, z0=z_prev)
        exchanges = 0
        for t, z in enumerate(z_seq):
            z = int(z)
            try:
                u_prev, _, _ = solver.solve_unknowns(x_cur, z, warm_start=u_prev)
            except NoConvergence as exc:
                exc.date = t
                raise
            cons = _consumption(solver.packs, x_cur[None, :], np.array([z]),
                                np.exp(u_prev[0:1]), u_prev[None, 1:])[0]
            fvals = solver.packs.forecasts(x_cur[None, :])[0, :, z]
            errs = np.abs(cons[1:] - fvals)
            trigger = errs >= np.maximum(maxerr[:, z], ERROR_FLOOR)
            for k in np.where(trigger)[0]:
                k = int(k)
                hit = error_ascent_step(economy, policy, x_cur, z, k, eta,
                                        solver=solver)
                if hit is None:
                    # the visited point itself witnesses the exceeded maximum
                    x_new, y_new, err_new = x_cur.copy(), float(cons[k + 1]), float(errs[k])
                else:
                    x_new = hit[0].holdings
                    y_new = float(hit[1])
                    err_new = abs(y_new - forecast(economy, policy, k, x_new, z))
                slot = ledger.slots[k][z]
                i = int(np.argmin(slot.errors))
                slot.points[i] = x_new
                slot.targets[i] = y_new
                slot.errors[i] = err_new
                maxerr[k, z] = slot.errors.max()
                exchanges += 1
            x_cur = u_prev[1:1 + s].copy()
        z_prev = int(z_seq[-1]) if m else z_prev
        exchanges_hist.append(exchanges)
        logger.info("outer %d: %d exchanges, max stored error %.3e",
                    outer, exchanges, maxerr.max())
        if exchanges == 0:
            break
        policy, targets, fits, sweeps = _time_iteration_core(
            economy, ledger, policy, eps_bar, max_sweeps=max_sweeps,
            threads=threads, warm_map=warm_map, solver=solver)
        _store_targets(ledger, targets)
        sweeps_hist.append(sweeps)
    else:
        raise MaxOuterIterations(
            f"no exchange-free sweep within {max_outer} outer iterations",
            diagnostics={"exchanges_per_iteration": exchanges_hist,
                         "maxerr": maxerr.tolist()})

    fit_res = np.array([[fits[k][z].residual for z in range(economy.n_states)]
                        for k in range(y_count)])
    diagnostics = {
        "outer_iterations": len(exchanges_hist),
        "exchanges_per_iteration": exchanges_hist,
        "time_iteration_sweeps": sweeps_hist,
        "final_state": x_cur.tolist(),
        "final_shock": z_prev,
        "maxerr": maxerr.tolist(),
        "n": int(n), "m": int(m), "eta": float(eta), "eps_bar": float(eps_bar),
        "basis_spec": basis_spec if isinstance(basis_spec, str) else "custom",
    }
    logger.info("exchange loop finished in %d outer iterations (%.1f s)",
                len(exchanges_hist), time.perf_counter() - t_start)
    return USJESolution(policy, ledger, fit_res, diagnostics)


def _store_targets(ledger: PointLedger, targets):
    for k, row in enumerate(targets):
        for z, y in enumerate(row):
            ledger.slots[k][z].targets = np.asarray(y, dtype=float).copy()
