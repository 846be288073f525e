"""Minimum-perturbation safety filter under an uncertainty-robustified barrier constraint.

Solves, over ``u`` with ``ubar = [1, u]``::

    min 0.5 |u - u_nom|^2   s.t.   a_vec @ ubar + offset - beta * ubar @ Sigma @ ubar >= 0

The constraint function is concave, so the problem is a convex program with a
single constraint. It is solved through its one-dimensional dual: for a
multiplier ``lam >= 0`` stationarity gives ``(I + 2 lam beta S_uu) u = u_nom + lam q``
and the constraint value along ``u(lam)`` is nondecreasing, so the active
multiplier is a scalar root.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .hocbf import (
    BarrierSpec,
    RobustConstraint,
    assemble_uncertain_constraint,
    nominal_constraint,
)
from .sparse_gp import ModelState, predict

log = logging.getLogger(__name__)

INTERIOR, ACTIVE, INFEASIBLE = "interior", "active", "infeasible-relaxed"


def compute_beta(delta: float, rkhs_bound: float, info_gain: float, P: int) -> float:
    """Confidence scale ``sqrt(2 |D|^2 + 300 kappa ln^3((P + 1) / delta))``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if P < 1:
        raise ValueError("P must be positive")
    if rkhs_bound < 0 or info_gain < 0:
        raise ValueError("RKHS bound and information gain must be nonnegative")
    return math.sqrt(2.0 * rkhs_bound**2 + 300.0 * info_gain * math.log((P + 1) / delta) ** 3)


@dataclass(frozen=True)
class BetaConfig:
    delta: float = 0.05
    rkhs_bound: float = 1.0
    info_gain: float = 0.0
    fixed: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.rkhs_bound < 0 or self.info_gain < 0:
            raise ValueError("RKHS bound and information gain must be nonnegative")

    def theoretical(self, P: int) -> float:
        return compute_beta(self.delta, self.rkhs_bound, self.info_gain, P)

    def value(self, P: int) -> float:
        """The fixed override when set, else the theoretical value."""
        return float(self.fixed) if self.fixed is not None else self.theoretical(P)


def _psd(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() < 0:
        if w.min() < -1e-9 * max(1.0, abs(w).max()):
            log.debug("clamping Sigma eigenvalue %.3e to zero", w.min())
        S = (V * np.maximum(w, 0.0)) @ V.T
    return S


@dataclass(frozen=True)
class SafetyProblem:
    u_nom: np.ndarray
    a_vec: np.ndarray
    offset: float
    Sigma: np.ndarray
    beta: float

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u_nom, dtype=float))
        a = np.asarray(self.a_vec, dtype=float).ravel()
        S = np.asarray(self.Sigma, dtype=float)
        if a.size != u.size + 1 or S.shape != (u.size + 1, u.size + 1):
            raise ValueError("a_vec/Sigma sizes must be m+1 for an m-dimensional control")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        object.__setattr__(self, "u_nom", u)
        object.__setattr__(self, "a_vec", a)
        object.__setattr__(self, "Sigma", _psd(S))
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "beta", float(self.beta))

    @classmethod
    def from_constraint(cls, con: RobustConstraint, u_nom) -> "SafetyProblem":
        return cls(u_nom, con.a_vec, con.offset, con.Sigma, con.beta)

    def constraint(self, u) -> float:
        ub = np.r_[1.0, np.asarray(u, dtype=float).ravel()]
        return float(self.a_vec @ ub + self.offset - self.beta * ub @ self.Sigma @ ub)

    def objective(self, u) -> float:
        d = np.asarray(u, dtype=float).ravel() - self.u_nom
        return 0.5 * float(d @ d)

    def quadratic_form(self):
        """Constraint as ``c0 + q @ u - beta * u @ S_uu @ u``."""
        S, a, b = self.Sigma, self.a_vec, self.beta
        c0 = a[0] + self.offset - b * S[0, 0]
        q = a[1:] - 2.0 * b * S[1:, 0]
        return c0, q, S[1:, 1:]


@dataclass(frozen=True)
class FilterResult:
    u: np.ndarray
    status: str
    constraint_value: float
    solve_iters: int
    lam: float = 0.0


def solve(problem: SafetyProblem, tol: float = 1e-10, max_iter: int = 200) -> FilterResult:
    u_nom = problem.u_nom
    g0 = problem.constraint(u_nom)
    if g0 >= 0:
        return FilterResult(u_nom.copy(), INTERIOR, g0, 0)

    c0, q, Suu = problem.quadratic_form()
    beta = problem.beta
    d, V = np.linalg.eigh(Suu)
    d = np.maximum(d, 0.0)
    # everything in the eigenbasis of S_uu: coordinates decouple
    un, qe = V.T @ u_nom, V.T @ q
    bd = 2.0 * beta * d

    def u_of(lam):
        return V @ ((un + lam * qe) / (1.0 + lam * bd))

    def g(lam):
        return problem.constraint(u_of(lam))

    # constraint maximizer; the constraint is unbounded above along q's
    # component in the null space of beta * S_uu
    flat = bd <= 1e-14 * max(1.0, bd.max(initial=0.0))
    if np.any(flat & (np.abs(qe) > 1e-14)):
        g_sup = math.inf
    else:
        ustar = np.where(flat, 0.0, qe / np.where(flat, 1.0, bd))
        g_sup = problem.constraint(V @ ustar)

    if g_sup < 0:
        ustar = np.where(flat, un, qe / np.where(flat, 1.0, bd))
        u = V @ ustar
        log.warning("safety constraint infeasible (max %.3e); returning constraint maximizer", g_sup)
        return FilterResult(u, INFEASIBLE, problem.constraint(u), 0, math.inf)

    hi, iters = 1.0, 0
    while g(hi) < 0:
        hi *= 4.0
        iters += 1
        if hi > 1e300:
            u = u_of(hi)
            return FilterResult(u, INFEASIBLE, problem.constraint(u), iters, hi)
    lam, res = optimize.brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                               maxiter=max_iter, full_output=True)
    iters += res.iterations
    u = u_of(lam)
    val = problem.constraint(u)
    if val < 0 and abs(val) > tol:
        # step to the feasible side of the bracket
        lam = _feasible_side(g, lam, hi)
        u = u_of(lam)
        val = problem.constraint(u)
    return FilterResult(u, ACTIVE, val, iters, float(lam))


def _feasible_side(g, lam, hi):
    step = max(abs(lam), 1e-300) * 1e-15
    while g(lam) < 0 and lam < hi:
        lam = min(lam + step, hi)
        step *= 2.0
    return lam


def kkt_residuals(problem: SafetyProblem, result: FilterResult) -> dict:
    """Stationarity, primal feasibility and complementary slackness of a solution."""
    c0, q, Suu = problem.quadratic_form()
    lam = 0.0 if result.status == INTERIOR else result.lam
    u = result.u
    grad_c = q - 2.0 * problem.beta * Suu @ u
    stat = u - problem.u_nom - lam * grad_c
    g = problem.constraint(u)
    return {
        "stationarity": float(np.linalg.norm(stat)),
        "primal": g,
        "lam": lam,
        "complementarity": abs(lam * g),
    }


def filter_control(
    state: ModelState | None,
    spec: BarrierSpec,
    model,
    x,
    u_nom,
    beta: float,
    t: float = 0.0,
    features=None,
) -> FilterResult:
    """Predict the discrepancy, robustify the nominal constraint and solve.

    ``features(x, t)`` maps the plant state to the learner's input; ``state=None``
    runs the plain nominal filter.
    """
    row = nominal_constraint(spec, model, x, t)
    m = row.F_row.size - 1
    if state is None:
        con = RobustConstraint(row.F_row, row.offset, np.zeros((m + 1, m + 1)), 0.0)
    else:
        xi = features(x, t) if features is not None else np.asarray(x, dtype=float)
        con = assemble_uncertain_constraint(row, predict(state, xi), beta)
    result = solve(SafetyProblem.from_constraint(con, u_nom))
    if result.status == INFEASIBLE:
        log.info("filter relaxed at t=%.3f", t)
    return result
