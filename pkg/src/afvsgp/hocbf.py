"""High-order control barrier functions with linear class-K gains.

For a barrier ``h`` of relative degree ``m`` and gains ``k_1..k_m`` the chain is
``psi_0 = h``, ``psi_i = d/dt psi_{i-1} + k_i psi_{i-1}``. With linear gains every
``psi_i`` is a fixed combination of the time derivatives of ``h``, namely the
coefficients of ``prod_{j<=i} (D + k_j)``; the top one is affine in the control::

    psi_m = [L_f^m h, L_g L_f^{m-1} h] @ [1, u] + offset

A barrier object supplies the derivatives of ``h`` up to order ``m - 1`` from the
state alone (``chain``) and the control-dependent top row for a given dynamics
model (``top``). Time-varying barriers fold partial time derivatives into both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .sparse_gp import Prediction


class Barrier(Protocol):
    relative_degree: int

    def chain(self, x, t: float, model) -> np.ndarray:
        """``[h, dh/dt, ..., d^{m-1}h/dt^{m-1}]`` at ``(x, t)``."""

    def top(self, x, t: float, model) -> tuple[float, np.ndarray]:
        """``(L_f^m h, L_g L_f^{m-1} h)`` under ``model``."""


def lie_derivatives(barrier: Barrier, model, x, t: float = 0.0):
    """Full chain ``(lf, lg)`` of ``barrier`` under ``model``.

    ``lf`` has ``m + 1`` entries ``L_f^j h`` and ``lg`` is the control row. A
    model flagged ``zero`` (no nominal knowledge) contributes nothing beyond ``h``.
    """
    m = barrier.relative_degree
    if getattr(model, "zero", False):
        h = barrier.chain(x, t, model)[0]
        lf = np.zeros(m + 1)
        lf[0] = h
        return lf, np.zeros(model.control_dim)
    lf = np.empty(m + 1)
    lf[:m] = barrier.chain(x, t, model)
    top, lg = barrier.top(x, t, model)
    lf[m] = top
    return lf, np.asarray(lg, dtype=float).ravel()


def _poly(gains) -> np.ndarray:
    """Ascending coefficients of ``prod (D + k)``."""
    c = np.array([1.0])
    for k in gains:
        c = np.r_[k * c, 0.0] + np.r_[0.0, c]
    return c


@dataclass(frozen=True)
class BarrierSpec:
    barrier: Barrier
    alphas: tuple[float, ...]

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if len(alphas) != self.barrier.relative_degree:
            raise ValueError(
                f"need {self.barrier.relative_degree} class-K gains, got {len(alphas)}"
            )
        if min(alphas) <= 0:
            raise ValueError("class-K gains must be positive")

    @property
    def m(self) -> int:
        return len(self.alphas)

    def coefficients(self, i: int) -> np.ndarray:
        """Weights of ``psi_i`` on ``[h, dh/dt, ..., d^i h/dt^i]``."""
        return _poly(self.alphas[:i])

    def psi_top_minus_one(self, derivs) -> float:
        """``psi_{m-1}`` from the first ``m`` time derivatives of ``h``."""
        return float(self.coefficients(self.m - 1) @ np.asarray(derivs)[: self.m])


@dataclass(frozen=True)
class ConstraintRow:
    """Nominal HOCBF constraint ``F_row @ ubar + offset >= 0``."""

    F_row: np.ndarray
    offset: float

    def value(self, ubar) -> float:
        return float(self.F_row @ np.asarray(ubar, dtype=float) + self.offset)


@dataclass(frozen=True)
class DiscrepancySample:
    state: np.ndarray
    ubar: np.ndarray
    z: float
    t: float = 0.0


@dataclass(frozen=True)
class RobustConstraint:
    """``a_vec @ ubar + offset - beta * ubar @ Sigma @ ubar >= 0``."""

    a_vec: np.ndarray
    offset: float
    Sigma: np.ndarray
    beta: float

    def value(self, ubar) -> float:
        ub = np.asarray(ubar, dtype=float)
        return float(self.a_vec @ ub + self.offset - self.beta * ub @ self.Sigma @ ub)


def psi_chain(spec: BarrierSpec, model, x, t: float = 0.0, u=None) -> np.ndarray:
    """``[psi_0, ..., psi_m]`` under ``model``; ``psi_m`` uses ``u`` (zero if omitted)."""
    lf, lg = lie_derivatives(spec.barrier, model, x, t)
    m = spec.m
    u = np.zeros(lg.size) if u is None else np.asarray(u, dtype=float).ravel()
    derivs = lf.copy()
    derivs[m] += lg @ u
    return np.array([spec.coefficients(i) @ derivs[: i + 1] for i in range(m + 1)])


def nominal_constraint(spec: BarrierSpec, model, x, t: float = 0.0) -> ConstraintRow:
    lf, lg = lie_derivatives(spec.barrier, model, x, t)
    m = spec.m
    c = spec.coefficients(m)
    # S(b) + alpha_m(psi_{m-1}) collapses to the lower-order terms of psi_m
    return ConstraintRow(np.r_[lf[m], lg], float(c[:m] @ lf[:m]))


def measured_psi(spec: BarrierSpec, model, x, t: float = 0.0) -> float:
    """``psi_{m-1}`` from the barrier's own state-based derivatives.

    Unlike :func:`psi_chain` this never goes through a (possibly zeroed) nominal
    model, so it reflects the measured state.
    """
    return spec.psi_top_minus_one(spec.barrier.chain(x, t, model))


def measure_discrepancy(
    spec: BarrierSpec, model, x_t, x_next, u, dt: float, t: float = 0.0
) -> DiscrepancySample:
    """Midpoint estimate of ``psi_m(true) - psi_m(nominal)`` over one held-control interval.

    ``z = (psi_{m-1}(x_next) - psi_{m-1}(x_t)) / dt + k_m psi_{m-1}(x_mid) - B0(x_mid, ubar)``
    where ``B0`` is the nominal constraint value. The finite difference is
    centred at the interval midpoint, so the error is ``O(dt^2)`` for smooth
    plants.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x_t = np.asarray(x_t, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    x_mid = 0.5 * (x_t + x_next)
    t_mid = t + 0.5 * dt
    ubar = np.r_[1.0, np.asarray(u, dtype=float).ravel()]
    psi0 = measured_psi(spec, model, x_t, t)
    psi1 = measured_psi(spec, model, x_next, t + dt)
    psi_mid = measured_psi(spec, model, x_mid, t_mid)
    b0 = nominal_constraint(spec, model, x_mid, t_mid).value(ubar)
    z = (psi1 - psi0) / dt + spec.alphas[-1] * psi_mid - b0
    return DiscrepancySample(x_mid, ubar, float(z), t_mid)


def assemble_uncertain_constraint(row: ConstraintRow, pred: Prediction, beta: float) -> RobustConstraint:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    Sigma = 0.5 * (pred.Sigma + pred.Sigma.T)
    return RobustConstraint(row.F_row + pred.b_vec, row.offset, Sigma, float(beta))


# ---------------------------------------------------------------------------
# concrete barriers
# ---------------------------------------------------------------------------


def _static(center):
    c = np.asarray(center, dtype=float)
    zero = np.zeros_like(c)
    return lambda t: (c, zero, zero)


class CircularObstacle:
    """``h = |p - c(t)|^2 - r^2`` on the controlled point of a mechanical system.

    ``center`` is either a fixed position or a callable ``t -> (c, dc/dt, d2c/dt2)``.
    The model must expose ``point(x) -> (p, v)`` and ``point_accel(x) -> (a_f, a_g)``.
    """

    relative_degree = 2

    def __init__(self, center, radius: float):
        self.center = center if callable(center) else _static(center)
        self.radius = float(radius)

    def h(self, x, t: float, model) -> float:
        p, _ = model.point(x)
        c, _, _ = self.center(t)
        d = p - c
        return float(d @ d - self.radius**2)

    def chain(self, x, t, model):
        p, v = model.point(x)
        c, cd, _ = self.center(t)
        d = p - c
        return np.array([d @ d - self.radius**2, 2.0 * d @ (v - cd)])

    def top(self, x, t, model):
        p, v = model.point(x)
        c, cd, cdd = self.center(t)
        a_f, a_g = model.point_accel(x)
        d, dv = p - c, v - cd
        return float(2.0 * dv @ dv + 2.0 * d @ (a_f - cdd)), 2.0 * d @ a_g


class HalfspaceBarrier:
    """``h = n @ p - level`` on the controlled point of a mechanical system."""

    relative_degree = 2

    def __init__(self, normal, level: float = 0.0):
        self.normal = np.asarray(normal, dtype=float)
        self.level = float(level)

    def chain(self, x, t, model):
        p, v = model.point(x)
        return np.array([self.normal @ p - self.level, self.normal @ v])

    def top(self, x, t, model):
        a_f, a_g = model.point_accel(x)
        return float(self.normal @ a_f), self.normal @ a_g


@dataclass
class FunctionBarrier:
    """Barrier from explicit callables, for ad-hoc systems."""

    relative_degree: int
    chain_fn: Callable
    top_fn: Callable

    def chain(self, x, t, model):
        return np.atleast_1d(np.asarray(self.chain_fn(x, t, model), dtype=float))

    def top(self, x, t, model):
        a, b = self.top_fn(x, t, model)
        return float(a), np.atleast_1d(np.asarray(b, dtype=float))
