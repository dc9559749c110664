"""Finite-dimensional polynomial policy classes for the forecast functions.

A basis is an ordered list of monomials over an augmented state vector
(x_1, ..., x_S, s) where s = -sum(x) is the closing holding implied by zero
net supply.  The built-in families, for a forecast target with own holding at
coordinate `own` (own = S selects the implied coordinate):

    P1: {1, own, own^2, own^3}
    P2: {1, x_1, ..., x_S, own^2, own^3}
    P3: {1, x_1, ..., x_S, own*x_1, ..., own*x_S, own^3}

P3's cross-term list runs over the stored coordinates, so for an interior own
coordinate it contains own*own (= own^2) exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DuplicateTerm, InvalidSpec
from .minimax import FitProblem

BUILTIN_SPECS = ("P1", "P2", "P3")
_MAX_DEGREE = 3


@dataclass(frozen=True)
class BasisTerm:
    """Monomial multi-index over the augmented state (stored coords + implied)."""

    exponents: tuple

    def __post_init__(self):
        if any(e < 0 or int(e) != e for e in self.exponents):
            raise InvalidSpec("exponents must be nonnegative integers")

    @property
    def degree(self):
        return int(sum(self.exponents))


@dataclass
class BasisSet:
    """Ordered, duplicate-free list of monomial terms over a given state space.

    Immutable after construction; the factor-index table `_factors` lets the
    solver evaluate every term with two multiplies.
    """

    terms: tuple
    state_dim: int
    own_index: int | None = None
    spec: str = "custom"
    _factors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        seen = set()
        for t in self.terms:
            if len(t.exponents) != self.state_dim + 1:
                raise DimensionMismatch(
                    f"term arity {len(t.exponents)} != state_dim+1 = {self.state_dim + 1}")
            if t.exponents in seen:
                raise DuplicateTerm(f"duplicate term {t.exponents}")
            seen.add(t.exponents)
        # factor indices into (x_1..x_S, s, 1): each monomial of degree <= 3
        # becomes a product of exactly three augmented coordinates
        one = self.state_dim + 1
        rows = []
        for t in self.terms:
            idx = []
            for coord, e in enumerate(t.exponents):
                idx.extend([coord] * int(e))
            if len(idx) > _MAX_DEGREE:
                raise InvalidSpec("total degree above 3 is not supported")
            idx.extend([one] * (_MAX_DEGREE - len(idx)))
            rows.append(idx)
        self._factors = np.asarray(rows, dtype=np.int64)

    def __len__(self):
        return len(self.terms)

    @property
    def n_terms(self):
        return len(self.terms)

    def to_dict(self):
        return {
            "spec": self.spec,
            "state_dim": self.state_dim,
            "own_index": self.own_index,
            "terms": [list(t.exponents) for t in self.terms],
        }

    @staticmethod
    def from_dict(data):
        terms = tuple(BasisTerm(tuple(int(e) for e in t)) for t in data["terms"])
        return BasisSet(terms, int(data["state_dim"]), data.get("own_index"),
                        data.get("spec", "custom"))


def _augment(points):
    """Append the implied closing holding s = -sum(x) and a ones column."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.hstack([pts, -pts.sum(axis=1, keepdims=True),
                      np.ones((pts.shape[0], 1))])


def _term(state_dim, powers=()):
    """Monomial from (coordinate, exponent) pairs; () gives the constant."""
    exps = [0] * (state_dim + 1)
    for coord, e in powers:
        exps[coord] += e
    return BasisTerm(tuple(exps))


def build_basis(spec, state_dim, own_index=None):
    """Construct a BasisSet from a named family or an explicit term list.

    `spec` is "P1" | "P2" | "P3" or an iterable of exponent tuples (arity
    state_dim or state_dim + 1, the optional last slot being the implied
    closing coordinate).  For the named families `own_index` is required:
    an integer in [0, state_dim), or state_dim to select the implied
    coordinate.
    """
    if isinstance(spec, str):
        name = spec.upper()
        if name not in BUILTIN_SPECS:
            raise InvalidSpec(f"unknown basis spec {spec!r}")
        if own_index is None:
            raise InvalidSpec(f"{name} requires own_index")
        own = int(own_index)
        if not 0 <= own <= state_dim:
            raise InvalidSpec(f"own_index {own} outside [0, {state_dim}]")
        const = _term(state_dim)
        linear = [_term(state_dim, [(j, 1)]) for j in range(state_dim)]
        if name == "P1":
            terms = [const] + [_term(state_dim, [(own, p)]) for p in (1, 2, 3)]
        elif name == "P2":
            terms = ([const] + linear
                     + [_term(state_dim, [(own, 2)]), _term(state_dim, [(own, 3)])])
        else:  # P3
            cross = [_term(state_dim, [(own, 1), (j, 1)]) for j in range(state_dim)]
            terms = [const] + linear + cross + [_term(state_dim, [(own, 3)])]
        return BasisSet(tuple(terms), state_dim, own, name)

    terms = []
    for exps in spec:
        exps = tuple(int(e) for e in exps)
        if len(exps) == state_dim:
            exps = exps + (0,)
        elif len(exps) != state_dim + 1:
            raise DimensionMismatch(
                f"term arity {len(exps)} incompatible with state_dim {state_dim}")
        terms.append(BasisTerm(exps))
    return BasisSet(tuple(terms), state_dim, own_index, "custom")


def evaluate(basis: BasisSet, x):
    """Feature vector psi(x) of length D for a single state vector."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != basis.state_dim:
        raise DimensionMismatch(
            f"state length {x.size} != state_dim {basis.state_dim}")
    aug = _augment(x[None, :])[0]
    fac = basis._factors
    return aug[fac[:, 0]] * aug[fac[:, 1]] * aug[fac[:, 2]]


def design_matrix(basis: BasisSet, points) -> np.ndarray:
    """Stack evaluate() over rows of `points` into FitProblem features."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != basis.state_dim:
        raise DimensionMismatch(
            f"points have {pts.shape[1]} coords, state_dim is {basis.state_dim}")
    aug = _augment(pts)
    fac = basis._factors
    return aug[:, fac[:, 0]] * aug[:, fac[:, 1]] * aug[:, fac[:, 2]]


def fit_problem(basis: BasisSet, points, targets) -> FitProblem:
    """Bundle a design matrix with targets for the minimax fitter."""
    return FitProblem(design_matrix(basis, points), targets)
