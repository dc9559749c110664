"""Temporary-equilibrium solver for a single state of the OLG economy.

Given forecast functions for next period's consumption, today's equilibrium
(bond price q, consumptions, portfolio choices) solves each age's Euler
condition with short-sale complementarity plus market clearing.  The
complementarity pairs (theta_a - theta_min_a >= 0, Euler residual >= 0) are
merged with the Fischer-Burmeister function phi(s, e) = s + e - sqrt(s^2+e^2),
giving a square smooth system in (log q, theta_1..theta_{A-1}) solved by a
damped Newton method with finite-difference Jacobians.

Everything is vectorized over a batch of states: the Jacobian of every state
is obtained from one batched residual call (2*A+1 evaluations fused), and each
state makes its own convergence and line-search decisions, so results are
independent of how a batch is chunked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .economy import (EndogenousState, OLGEconomy, PolicyTable, forecast,
                      is_valid_state)
from .errors import DimensionMismatch, NoConvergence, NonpositiveConsumption

NEWTON_TOL = 1e-10
_CONS_FLOOR = 1e-12          # keeps c**(-gamma) defined during excursions
_LOGQ_LIMIT = 16.0
_LINE_FACTORS = np.array([1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.01])
_FD_SCALE = 1e-6
_STEP_CAP = 4.0              # trust region: largest |step| component per iteration


# ---------------------------------------------------------------------------
# packed model arrays
# ---------------------------------------------------------------------------

class _Packs:
    """Economy and policy unpacked into flat arrays for the batched kernels."""

    def __init__(self, economy: OLGEconomy, policy: PolicyTable):
        self.A = economy.A
        self.S = economy.state_dim
        self.Z = economy.n_states
        self.Y = economy.n_targets
        if policy.n_targets != self.Y:
            raise DimensionMismatch(
                f"policy has {policy.n_targets} targets, economy needs {self.Y}")
        self.beta = economy.beta
        self.gamma = economy.gamma
        self.eps = economy.clamp_epsilon
        self.e_zt = economy.endowments.T.copy()      # (Z, A)
        self.e_agg = economy.aggregate.copy()        # (Z,)
        self.pi = economy.shocks.transition.copy()   # (Z, Z)
        self.bound = economy.short_sale_bound.copy()  # (A-1,)
        self.set_policy(policy)

    def set_policy(self, policy: PolicyTable):
        dmax = max(b.n_terms for b in policy.bases)
        one = self.S + 2  # columns: x_1..x_S, implied, one
        idx = np.full((self.Y, dmax, 3), one, dtype=np.int64)
        coef = np.zeros((self.Y, self.Z, dmax))
        for k, (b, c) in enumerate(zip(policy.bases, policy.coefficients)):
            if b.state_dim != self.S:
                raise DimensionMismatch("basis state_dim does not match economy")
            idx[k, : b.n_terms] = b._factors
            coef[k, :, : b.n_terms] = c
        self.idx = idx
        self.coef = coef

    def forecasts(self, x_next):
        """Clamped consumption forecasts (B, Y, Z) at next states (B, S)."""
        b = x_next.shape[0]
        aug = np.empty((b, self.S + 3))
        aug[:, : self.S] = x_next
        aug[:, self.S] = -x_next.sum(axis=1)
        aug[:, self.S + 1] = 1.0  # padding column for short monomials
        aug[:, self.S + 2] = 1.0  # padding column for unused coefficients
        feats = (aug[:, self.idx[:, :, 0]]
                 * aug[:, self.idx[:, :, 1]]
                 * aug[:, self.idx[:, :, 2]])        # (B, Y, Dmax)
        raw = np.einsum("byd,yzd->byz", feats, self.coef)
        return np.clip(raw, self.eps, self.e_agg[None, None, :])


def _fb(s, e):
    return s + e - np.sqrt(s * s + e * e)


def _consumption(p: _Packs, x, zidx, q, th):
    """Budget-identity consumption (B, A); age-1 starts empty-handed."""
    e_now = p.e_zt[zidx]                      # (B, A)
    c = np.empty_like(e_now)
    c[:, : p.A - 1] = e_now[:, : p.A - 1] - q[:, None] * th
    c[:, 1: p.A - 1] += x
    c[:, p.A - 1] = e_now[:, p.A - 1] - x.sum(axis=1)
    return c


def _residuals_batch(p: _Packs, x, zidx, u):
    """System residuals (B, A) at unknowns u = (log q, theta_1..theta_{A-1})."""
    q = np.exp(u[:, 0])
    th = u[:, 1:]
    c = _consumption(p, x, zidx, q, th)
    cm = np.maximum(c[:, : p.A - 1], _CONS_FLOOR) ** (-p.gamma)
    ch = p.forecasts(th[:, : p.S])            # (B, Y, Z)
    mu_next = ch ** (-p.gamma)
    expect = np.einsum("byz,bz->by", mu_next, p.pi[zidx])
    euler = q[:, None] * cm - p.beta * expect
    slack = th - p.bound[None, :]
    out = np.empty((u.shape[0], p.A))
    out[:, : p.A - 1] = _fb(slack, euler)
    out[:, p.A - 1] = th.sum(axis=1)
    return out


def _euler_and_slack(p: _Packs, x, zidx, u):
    q = np.exp(u[:, 0])
    th = u[:, 1:]
    c = _consumption(p, x, zidx, q, th)
    cm = np.maximum(c[:, : p.A - 1], _CONS_FLOOR) ** (-p.gamma)
    ch = p.forecasts(th[:, : p.S])
    expect = np.einsum("byz,bz->by", ch ** (-p.gamma), p.pi[zidx])
    euler = q[:, None] * cm - p.beta * expect
    return euler, th - p.bound[None, :], c


def _fd_jacobian(p: _Packs, x, zidx, u):
    """Central-difference Jacobians (B, A, A) from one fused residual call."""
    b, n = u.shape
    h = _FD_SCALE * np.maximum(1.0, np.abs(u))       # (B, n)
    u_all = np.repeat(u[:, None, :], 2 * n, axis=1)  # (B, 2n, n)
    cols = np.arange(n)
    u_all[:, cols, cols] += h
    u_all[:, n + cols, cols] -= h
    r = _residuals_batch(p,
                         np.repeat(x, 2 * n, axis=0),
                         np.repeat(zidx, 2 * n),
                         u_all.reshape(b * 2 * n, n)).reshape(b, 2 * n, n)
    jac = (r[:, :n] - r[:, n:]) / (2.0 * h)[:, :, None]
    return np.swapaxes(jac, 1, 2)  # d residual_i / d u_j


def _solve_steps(jac, rhs):
    """Newton steps with a per-state fallback for singular Jacobians."""
    try:
        return np.linalg.solve(jac, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for i in range(jac.shape[0]):
            try:
                out[i] = np.linalg.solve(jac[i], rhs[i])
            except np.linalg.LinAlgError:
                damped = jac[i] + 1e-8 * np.eye(jac.shape[1])
                out[i] = np.linalg.lstsq(damped, rhs[i], rcond=None)[0]
        return out


def _newton_batch(p: _Packs, x, zidx, u0, tol=NEWTON_TOL, max_iter=200):
    """Damped Newton over a batch; each state converges independently.

    Returns (u, converged, iterations, residual_norms).
    """
    u = u0.copy()
    b, n = u.shape
    res = _residuals_batch(p, x, zidx, u)
    nrm = np.max(np.abs(res), axis=1)
    merit = np.einsum("bi,bi->b", res, res)
    iters = np.zeros(b, dtype=np.int64)
    active = nrm > tol
    for _ in range(max_iter):
        if not active.any():
            break
        ia = np.where(active)[0]
        xa, za, ua = x[ia], zidx[ia], u[ia]
        jac = _fd_jacobian(p, xa, za, ua)
        step = _solve_steps(jac, -res[ia])
        # trust region: huge Newton steps (near-singular Jacobians, forecast
        # plateaus) would fling iterates into absurd territory
        widest = np.max(np.abs(step), axis=1)
        shrink = np.minimum(1.0, _STEP_CAP / np.maximum(widest, 1e-300))
        step *= shrink[:, None]
        nf = _LINE_FACTORS.size
        trial = ua[:, None, :] + _LINE_FACTORS[None, :, None] * step[:, None, :]
        trial[:, :, 0] = np.clip(trial[:, :, 0], -_LOGQ_LIMIT, _LOGQ_LIMIT)
        rt = _residuals_batch(p,
                              np.repeat(xa, nf, axis=0),
                              np.repeat(za, nf),
                              trial.reshape(-1, n)).reshape(len(ia), nf, n)
        mt = np.einsum("bfi,bfi->bf", rt, rt)
        accept = mt < (1.0 - 1e-4 * _LINE_FACTORS)[None, :] * merit[ia, None]
        # first acceptable damping factor, else the best merit among trials
        first = np.argmax(accept, axis=1)
        none_ok = ~accept.any(axis=1)
        first[none_ok] = np.argmin(mt[none_ok], axis=1)
        rows = np.arange(len(ia))
        u[ia] = trial[rows, first]
        res[ia] = rt[rows, first]
        merit[ia] = mt[rows, first]
        nrm[ia] = np.max(np.abs(res[ia]), axis=1)
        iters[ia] += 1
        active[ia] = nrm[ia] > tol
    return u, ~active, iters, nrm


# ---------------------------------------------------------------------------
# public surface
# ---------------------------------------------------------------------------

@dataclass
class TemporaryEquilibrium:
    """Market-clearing price, consumptions, choices, and shadow values."""

    price: float
    consumption: np.ndarray
    choices: np.ndarray
    multipliers: np.ndarray
    iterations: int = 0
    residual_norm: float = 0.0


def _holdings_array(state, economy):
    h = state.holdings if isinstance(state, EndogenousState) else np.asarray(state, dtype=float)
    h = h.ravel()
    if h.size != economy.state_dim:
        raise DimensionMismatch(
            f"state has {h.size} coordinates, economy needs {economy.state_dim}")
    return h


def residual_system(economy: OLGEconomy, policy: PolicyTable, state, z, unknowns):
    """Residual vector of length A at unknowns (q, theta_1..theta_{A-1})."""
    unknowns = np.asarray(unknowns, dtype=float).ravel()
    if unknowns.size != economy.A:
        raise DimensionMismatch(f"expected {economy.A} unknowns")
    if unknowns[0] <= 0:
        raise ValueError("the bond price must be positive")
    p = _Packs(economy, policy)
    x = _holdings_array(state, economy)[None, :]
    u = np.concatenate([[np.log(unknowns[0])], unknowns[1:]])[None, :]
    return _residuals_batch(p, x, np.array([z]), u)[0]


def _autarky_guess(p: _Packs, zidx_row):
    """theta = 0, q from the age-1 Euler equation at the zero next state."""
    z = int(zidx_row)
    ch = p.forecasts(np.zeros((1, p.S)))[0]          # (Y, Z)
    expect1 = float(p.pi[z] @ ch[0] ** (-p.gamma))
    c1 = p.e_zt[z, 0]
    q = p.beta * expect1 * c1 ** p.gamma
    u = np.zeros(p.A)
    u[0] = np.clip(np.log(max(q, 1e-12)), -_LOGQ_LIMIT, _LOGQ_LIMIT)
    return u


def _build_te(p: _Packs, x, z, u, iterations, residual_norm):
    q = float(np.exp(u[0]))
    th = u[1:].copy()
    euler, _slack, c = _euler_and_slack(p, x[None, :], np.array([z]), u[None, :])
    c = c[0]
    if np.any(c <= 1e-10):
        raise NonpositiveConsumption(
            f"consumption hit the evaluation floor: min c = {c.min():.3e}")
    mult = np.maximum(euler[0], 0.0)
    return TemporaryEquilibrium(q, c, th, mult, int(iterations), float(residual_norm))


class EquilibriumSolver:
    """Stateful solver around the Newton kernel: warm-start cache + retries.

    The retry ladder on a failed solve: (i) warm start from the nearest
    previously solved state (same shock), (ii) restart from the autarky
    unknowns, (iii) homotopy in the state from the nearest solved point in
    4 steps.  The cache is per-instance; share one instance per worker only.
    """

    def __init__(self, economy: OLGEconomy, policy: PolicyTable,
                 tol=NEWTON_TOL, max_iter=200, cache_size=256):
        self.economy = economy
        self.packs = _Packs(economy, policy)
        self.tol = tol
        self.max_iter = max_iter
        self._cache_size = cache_size
        z = economy.n_states
        s = economy.state_dim
        self._cx = [np.empty((cache_size, s)) for _ in range(z)]
        self._cu = [np.empty((cache_size, economy.A)) for _ in range(z)]
        self._cn = [0] * z
        self._cpos = [0] * z

    def update_policy(self, policy: PolicyTable):
        """Swap in new forecast coefficients; cached solutions stay as warm starts."""
        self.packs.set_policy(policy)

    def _remember(self, x, z, u):
        i = self._cpos[z]
        self._cx[z][i] = x
        self._cu[z][i] = u
        self._cpos[z] = (i + 1) % self._cache_size
        self._cn[z] = min(self._cn[z] + 1, self._cache_size)

    def _nearest(self, x, z):
        n = self._cn[z]
        if n == 0:
            return None, None
        d = np.einsum("ij,ij->i", self._cx[z][:n] - x, self._cx[z][:n] - x)
        i = int(np.argmin(d))
        return self._cx[z][i].copy(), self._cu[z][i].copy()

    def _attempt(self, x, z, u0):
        u, ok, iters, nrm = _newton_batch(
            self.packs, x[None, :], np.array([z]), u0[None, :],
            tol=self.tol, max_iter=self.max_iter)
        return u[0], bool(ok[0]), int(iters[0]), float(nrm[0])

    def solve_unknowns(self, x, z, warm_start=None):
        """Solved unknown vector (log q, theta) at holdings x, shock z."""
        x = np.asarray(x, dtype=float).ravel()
        tried = []
        if warm_start is not None:
            tried.append(np.asarray(warm_start, dtype=float).copy())
        near_x, near_u = self._nearest(x, z)
        if near_u is not None:
            tried.append(near_u)
        tried.append(_autarky_guess(self.packs, z))
        total_iters = 0
        last = None
        for u0 in tried:
            u, ok, iters, nrm = self._attempt(x, z, u0)
            total_iters += iters
            last = nrm
            if ok:
                self._remember(x, z, u)
                return u, total_iters, nrm
        if near_u is not None:
            # homotopy in the state from the nearest solved point
            u0 = near_u
            ok = True
            for t in (0.25, 0.5, 0.75, 1.0):
                xt = near_x + t * (x - near_x)
                u0, ok, iters, nrm = self._attempt(xt, z, u0)
                total_iters += iters
                last = nrm
                if not ok:
                    break
            if ok:
                self._remember(x, z, u0)
                return u0, total_iters, nrm
        raise NoConvergence(
            f"temporary equilibrium did not converge (|R| = {last:.3e})",
            residual_norm=last, state=x)

    def solve(self, state, z, warm_start=None) -> TemporaryEquilibrium:
        x = _holdings_array(state, self.economy)
        u, iters, nrm = self.solve_unknowns(x, z, warm_start)
        return _build_te(self.packs, x, z, u, iters, nrm)

    def solve_batch(self, x, zidx, u0=None):
        """Solve many independent states at once; ladder retries on failures.

        Returns (u, iterations) with u of shape (B, A).  Raises NoConvergence
        if any state remains unsolved after the retry ladder.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        zidx = np.asarray(zidx, dtype=np.int64).ravel()
        if u0 is None:
            u0 = np.vstack([_autarky_guess(self.packs, z) for z in zidx])
        u, ok, iters, _ = _newton_batch(self.packs, x, zidx, u0,
                                        tol=self.tol, max_iter=self.max_iter)
        if not ok.all():
            for i in np.where(~ok)[0]:
                ui, extra, _ = self.solve_unknowns(x[i], int(zidx[i]))
                u[i] = ui
                iters[i] += extra
        return u, iters


def solve_temporary_equilibrium(economy: OLGEconomy, policy: PolicyTable,
                                state, z, warm_start=None) -> TemporaryEquilibrium:
    """Solve one temporary equilibrium; pure function of its arguments.

    `warm_start` is an optional unknown vector (q, theta_1..theta_{A-1}).
    Long-running loops should hold an EquilibriumSolver instead, which reuses
    nearby solutions as warm starts.
    """
    solver = EquilibriumSolver(economy, policy)
    u0 = None
    if warm_start is not None:
        w = np.asarray(warm_start, dtype=float).ravel()
        if w.size != economy.A or w[0] <= 0:
            raise ValueError("warm start must be (q > 0, theta_1..theta_{A-1})")
        u0 = np.concatenate([[np.log(w[0])], w[1:]])
    x = _holdings_array(state, economy)
    u, iters, nrm = solver.solve_unknowns(x, z, u0)
    return _build_te(solver.packs, x, z, u, iters, nrm)


# ---------------------------------------------------------------------------
# gradient ascent on the forecast error
# ---------------------------------------------------------------------------

def gradient_ascent_step(error_fn, x, eta, *, halvings=5, fd_step=1e-5,
                         is_valid=None):
    """One ascent step of length eta on error_fn with back-tracking.

    The gradient comes from central differences (one-sided when a side is
    unavailable: error_fn may return None).  The step is halved up to
    `halvings` times until the error strictly exceeds error_fn(x) at a valid
    point; returns (x_new, error_new) or None.
    """
    x = np.asarray(x, dtype=float).ravel()
    e0 = error_fn(x)
    if e0 is None:
        return None
    grad = np.zeros(x.size)
    for j in range(x.size):
        h = fd_step * max(1.0, abs(x[j]))
        up = x.copy()
        up[j] += h
        dn = x.copy()
        dn[j] -= h
        eu = error_fn(up) if (is_valid is None or is_valid(up)) else None
        ed = error_fn(dn) if (is_valid is None or is_valid(dn)) else None
        if eu is not None and ed is not None:
            grad[j] = (eu - ed) / (2 * h)
        elif eu is not None:
            grad[j] = (eu - e0) / h
        elif ed is not None:
            grad[j] = (e0 - ed) / h
    norm = float(np.linalg.norm(grad))
    if norm <= 1e-12 * max(1.0, abs(e0)):
        return None
    direction = grad / norm
    step = float(eta)
    for _ in range(halvings + 1):
        cand = x + step * direction
        if is_valid is None or is_valid(cand):
            e1 = error_fn(cand)
            if e1 is not None and e1 > e0:
                return cand, float(e1)
        step *= 0.5
    return None


def error_ascent_step(economy: OLGEconomy, policy: PolicyTable, state, z, k,
                      eta, solver: EquilibriumSolver | None = None):
    """Search near `state` for a strictly larger forecast error on target k.

    Estimates the gradient of |y_k(x) - P_k(x, z)| by re-solving the
    temporary equilibrium at perturbed states (warm-started from the base
    solution) and proposes x + eta * grad/|grad| with up to 5 halvings.
    Returns (EndogenousState, realized target value) or None.
    """
    if solver is None:
        solver = EquilibriumSolver(economy, policy)
    x0 = _holdings_array(state, economy)
    base_u, _, _ = solver.solve_unknowns(x0, z)
    packs = solver.packs

    def target_at(x):
        try:
            u, _, _ = solver.solve_unknowns(x, z, warm_start=base_u)
        except NoConvergence:
            return None
        c = _consumption(packs, x[None, :], np.array([z]),
                         np.exp(u[0:1]), u[None, 1:])[0]
        return float(c[k + 1])

    def error_at(x):
        y = target_at(x)
        if y is None:
            return None
        return abs(y - forecast(economy, policy, k, x, z))

    def valid(x):
        return is_valid_state(x, economy)

    hit = gradient_ascent_step(error_at, x0, eta, is_valid=valid)
    if hit is None:
        return None
    x_new, _err = hit
    y_new = target_at(x_new)
    if y_new is None:
        return None
    return EndogenousState(x_new), y_new
