"""Stochastic OLG exchange economy: primitives, state transition, forecasts.

Agents live A periods, trade a single risk-free bond in zero net supply
(payoff 1 per unit, consumption good as numeraire), and face short-sale
constraints theta_a >= -min_z e_{a+1}(z).  The endogenous state is the vector
of beginning-of-period holdings of ages 2..A-1; the age-A holding is implied
by market clearing, so the state has A-2 coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, evaluate
from .errors import DimensionMismatch, InvalidSpec, MarketClearingViolation

DEFAULT_CLAMP_EPSILON = 1e-3
_STATE_TOL = 1e-12


@dataclass(frozen=True)
class ShockProcess:
    """Finite-state first-order Markov shock process."""

    transition: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        pi = np.atleast_2d(np.asarray(self.transition, dtype=float))
        if pi.shape[0] != pi.shape[1]:
            raise InvalidSpec("transition matrix must be square")
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidSpec("transition rows must be nonnegative and sum to 1")
        object.__setattr__(self, "transition", pi)

    @property
    def n_states(self):
        return self.transition.shape[0]

    def stationary_distribution(self):
        """Left eigenvector for eigenvalue 1, normalized to a distribution."""
        vals, vecs = np.linalg.eig(self.transition.T)
        i = int(np.argmin(np.abs(vals - 1.0)))
        p = np.real(vecs[:, i])
        p = np.abs(p)
        return p / p.sum()


@dataclass(frozen=True)
class OLGEconomy:
    """Demographics, CRRA preferences, endowments, and trading constraints.

    endowments is an (A, Z) matrix e_a(z) in consumption units.  The
    short-sale bound for the choice made at age a (a = 1..A-1) is
    -min_z e_{a+1}(z); age-A agents hold nothing.
    """

    A: int
    beta: float
    gamma: float
    endowments: np.ndarray
    shocks: ShockProcess
    clamp_epsilon: float = DEFAULT_CLAMP_EPSILON
    short_sale_bound: np.ndarray = field(init=False)
    aggregate: np.ndarray = field(init=False)

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.endowments, dtype=float))
        if e.shape != (self.A, self.shocks.n_states):
            raise DimensionMismatch(
                f"endowments shape {e.shape} != (A, Z) = "
                f"({self.A}, {self.shocks.n_states})")
        if np.any(e <= 0):
            raise InvalidSpec("endowments must be positive at every (age, state)")
        if self.A < 2 or self.beta <= 0 or self.gamma <= 0 or self.clamp_epsilon <= 0:
            raise InvalidSpec("need A >= 2, beta > 0, gamma > 0, clamp_epsilon > 0")
        object.__setattr__(self, "endowments", e)
        object.__setattr__(self, "short_sale_bound", -e[1:].min(axis=1))
        object.__setattr__(self, "aggregate", e.sum(axis=0))

    @property
    def n_states(self):
        return self.shocks.n_states

    @property
    def state_dim(self):
        return self.A - 2

    @property
    def n_targets(self):
        """Forecast targets: consumption of ages 2..A."""
        return self.A - 1


@dataclass(frozen=True)
class EndogenousState:
    """Beginning-of-period holdings of ages 2..A-1 (the age-A one is implied)."""

    holdings: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.holdings, dtype=float).ravel()
        object.__setattr__(self, "holdings", h)

    @property
    def implied_final(self):
        """Age-A beginning-of-period holding from zero net supply."""
        return -float(self.holdings.sum())

    def validate(self, economy: OLGEconomy, tol=_STATE_TOL):
        h = self.holdings
        if h.size != economy.state_dim:
            raise DimensionMismatch(
                f"state has {h.size} coordinates, economy needs {economy.state_dim}")
        bound = economy.short_sale_bound
        if np.any(h < bound[: h.size] - tol):
            raise InvalidSpec("holdings violate a short-sale bound")
        if self.implied_final < bound[-1] - tol:
            raise InvalidSpec("implied age-A holding violates its short-sale bound")
        return self


def is_valid_state(holdings, economy: OLGEconomy, tol=_STATE_TOL):
    """Bound check on a raw holdings vector, without raising."""
    h = np.asarray(holdings, dtype=float).ravel()
    bound = economy.short_sale_bound
    return bool(np.all(h >= bound[: h.size] - tol)
                and -h.sum() >= bound[-1] - tol)


@dataclass
class PolicyTable:
    """Forecast coefficients alpha[k][z][d] with one BasisSet per target k.

    Target k (0-based) forecasts the consumption of age k+2 next period, so
    k = 0..A-2 covers ages 2..A.
    """

    bases: list
    coefficients: list

    def __post_init__(self):
        if len(self.bases) != len(self.coefficients):
            raise DimensionMismatch("one coefficient table per basis required")
        coefs = []
        for b, c in zip(self.bases, self.coefficients):
            c = np.atleast_2d(np.asarray(c, dtype=float))
            if c.shape[1] != b.n_terms:
                raise DimensionMismatch(
                    f"coefficient rows of length {c.shape[1]} != D = {b.n_terms}")
            if not np.isfinite(c).all():
                raise InvalidSpec("policy coefficients must be finite")
            coefs.append(c)
        self.coefficients = coefs

    @property
    def n_targets(self):
        return len(self.bases)

    def copy(self):
        return PolicyTable(list(self.bases), [c.copy() for c in self.coefficients])

    def max_abs(self):
        return max(float(np.max(np.abs(c))) for c in self.coefficients)

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(a - b)))
                   for a, b in zip(self.coefficients, other.coefficients))

    def to_dict(self):
        return {
            "bases": [b.to_dict() for b in self.bases],
            "coefficients": [c.tolist() for c in self.coefficients],
        }

    @staticmethod
    def from_dict(data):
        bases = [BasisSet.from_dict(b) for b in data["bases"]]
        return PolicyTable(bases, [np.array(c, dtype=float) for c in data["coefficients"]])


# ---------------------------------------------------------------------------
# built-in example economy
# ---------------------------------------------------------------------------

# deterministic endowment profile: hump-shaped over the 10-period lifespan
def _deterministic_profile():
    ages = np.arange(1, 11)
    return np.where(ages <= 4, 0.6 + 0.2 * ages, 1.4 - 0.2 * (ages - 5))


# per-age loadings of the three i.i.d. +/-0.1 endowment factors
_LOADINGS = np.array([
    [1.0, np.sqrt(2 / 3), np.sqrt(1 / 3), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, np.sqrt(1 / 3), np.sqrt(2 / 3), 1.0, np.sqrt(2 / 3), np.sqrt(1 / 3),
     0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, np.sqrt(1 / 3), np.sqrt(2 / 3), 1.0, 0.5, 0.25, 0.0],
])


def iid_sign_states(n_factors, magnitude):
    """All sign combinations of n_factors i.i.d. +/-magnitude shocks.

    States are ordered with + before -: index 0 is all-plus, the last index is
    all-minus.
    """
    return np.array(list(itertools.product((magnitude, -magnitude),
                                           repeat=n_factors)))


def build_example_economy(clamp_epsilon=DEFAULT_CLAMP_EPSILON):
    """The built-in 10-period economy: beta 0.75, gamma 3, eight shock states.

    Endowments combine the hump-shaped deterministic profile with three
    additive i.i.d. factors taking +/-0.1 with probability 1/2 each, loaded
    per age by the table above; the 2^3 = 8 sign states are equiprobable.
    Returns (OLGEconomy, ShockProcess); the process is also attached to the
    economy.
    """
    sigma = iid_sign_states(3, 0.1)  # (8, 3)
    e = _deterministic_profile()[:, None] + _LOADINGS.T @ sigma.T  # (10, 8)
    z = sigma.shape[0]
    labels = tuple("".join("+" if s > 0 else "-" for s in row) for row in sigma)
    shocks = ShockProcess(np.full((z, z), 1.0 / z), labels)
    econ = OLGEconomy(A=10, beta=0.75, gamma=3.0, endowments=e, shocks=shocks,
                      clamp_epsilon=clamp_epsilon)
    return econ, shocks


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def aggregate_endowment(economy: OLGEconomy, z):
    """Total consumption available in state z (the bond pays out of zero supply)."""
    return float(economy.aggregate[z])


def transition(state: EndogenousState, chosen, z_next=None) -> EndogenousState:
    """Map current portfolio choices to next period's endogenous state.

    The age-a choice becomes the age-(a+1) beginning-of-period holding; the
    implied age-A holding is chosen[-1], consistent with zero net supply.
    `z_next` is accepted for signature symmetry; the transition of holdings
    does not depend on it.
    """
    chosen = np.asarray(chosen, dtype=float).ravel()
    total = float(chosen.sum())
    if abs(total) > 1e-9:
        raise MarketClearingViolation(f"choices sum to {total:.3e}, not 0")
    return EndogenousState(chosen[:-1].copy())


def clamp_forecast(raw, z, epsilon, economy: OLGEconomy):
    """Clip a raw consumption forecast into [epsilon, aggregate endowment]."""
    upper = economy.aggregate[z]
    if raw <= epsilon:
        return epsilon
    if raw >= upper:
        return float(upper)
    return float(raw)


def forecast(economy: OLGEconomy, policy: PolicyTable, k, state, z):
    """Clamped consumption forecast P_k(state, z) in goods units."""
    holdings = state.holdings if isinstance(state, EndogenousState) else np.asarray(state, dtype=float)
    feats = evaluate(policy.bases[k], holdings)
    raw = float(feats @ policy.coefficients[k][z])
    return clamp_forecast(raw, z, economy.clamp_epsilon, economy)


# ---------------------------------------------------------------------------
# config ingestion
# ---------------------------------------------------------------------------

def economy_from_config(cfg: dict) -> OLGEconomy:
    """Build an OLGEconomy from the JSON config mapping.

    Schema: {"A", "beta", "gamma",
             "endowment": {"profile": "table1"} | {"matrix": [[...]]},
             "shocks": {"iid_factors": n, "magnitude": m} | {"transition": [[...]]},
             "asset": {"type": "riskfree", "net_supply": 0},
             "clamp_epsilon": eps}
    """
    asset = cfg.get("asset", {"type": "riskfree", "net_supply": 0})
    if asset.get("type", "riskfree") != "riskfree" or asset.get("net_supply", 0) != 0:
        raise InvalidSpec("only the zero-net-supply risk-free asset is supported")
    eps = float(cfg.get("clamp_epsilon", DEFAULT_CLAMP_EPSILON))

    endow = cfg.get("endowment", {"profile": "table1"})
    shocks_cfg = cfg.get("shocks", {"iid_factors": 3, "magnitude": 0.1})
    if endow.get("profile") == "table1":
        if shocks_cfg.get("iid_factors", 3) != 3:
            raise InvalidSpec("the table1 profile carries loadings for 3 factors")
        mag = float(shocks_cfg.get("magnitude", 0.1))
        sigma = iid_sign_states(3, mag)
        e = _deterministic_profile()[:, None] + _LOADINGS.T @ sigma.T
        z = sigma.shape[0]
        shocks = ShockProcess(np.full((z, z), 1.0 / z))
        econ = OLGEconomy(A=int(cfg.get("A", 10)), beta=float(cfg.get("beta", 0.75)),
                          gamma=float(cfg.get("gamma", 3.0)), endowments=e,
                          shocks=shocks, clamp_epsilon=eps)
        if econ.A != 10:
            raise InvalidSpec("the table1 profile is defined for A = 10")
        return econ

    if "matrix" not in endow:
        raise InvalidSpec("endowment config needs 'profile' or 'matrix'")
    e = np.array(endow["matrix"], dtype=float)
    if "transition" in shocks_cfg:
        shocks = ShockProcess(np.array(shocks_cfg["transition"], dtype=float))
    elif "iid_factors" in shocks_cfg:
        z = 2 ** int(shocks_cfg["iid_factors"])
        shocks = ShockProcess(np.full((z, z), 1.0 / z))
    else:
        raise InvalidSpec("shocks config needs 'transition' or 'iid_factors'")
    return OLGEconomy(A=int(cfg["A"]), beta=float(cfg["beta"]),
                      gamma=float(cfg["gamma"]), endowments=e, shocks=shocks,
                      clamp_epsilon=eps)
