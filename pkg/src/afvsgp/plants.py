"""Desk-scale control-affine plants ``dx/dt = f(x) + g(x) u``.

All plants are mechanical: the state is ``(q, dq)`` and a single controlled
point (the mass itself, or an arm's end effector) is exposed through
``point(x) -> (p, v)`` and ``point_accel(x) -> (a_f, a_g)`` with
``dv/dt = a_f + a_g @ u``. Barriers on the point are built from these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MechanicalSystem:
    zero = False
    nq: int
    control_dim: int

    @property
    def state_dim(self) -> int:
        return 2 * self.nq

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.nq], x[self.nq :]

    def joint_accel(self, x):
        """``(qdd_f, qdd_g)`` with ``qdd = qdd_f + qdd_g @ u``."""
        raise NotImplementedError

    def f(self, x) -> np.ndarray:
        _, dq = self.split(x)
        return np.r_[dq, self.joint_accel(x)[0]]

    def g(self, x) -> np.ndarray:
        return np.vstack((np.zeros((self.nq, self.control_dim)), self.joint_accel(x)[1]))

    def dynamics(self, x, u) -> np.ndarray:
        return self.f(x) + self.g(x) @ np.asarray(u, dtype=float)

    def point(self, x):
        raise NotImplementedError

    def point_accel(self, x):
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError


class DoubleIntegrator(MechanicalSystem):
    """Point mass ``mass * a = u - drag * v + bias`` in ``dim`` dimensions."""

    def __init__(self, dim: int = 2, mass: float = 1.0, drag: float = 0.0, bias=0.0):
        self.nq = self.control_dim = int(dim)
        self.mass = float(mass)
        self.drag = float(drag)
        self.bias = np.broadcast_to(np.asarray(bias, dtype=float), (self.nq,)).copy()

    def joint_accel(self, x):
        _, v = self.split(x)
        return (self.bias - self.drag * v) / self.mass, np.eye(self.nq) / self.mass

    def point(self, x):
        return self.split(x)

    def point_accel(self, x):
        return self.joint_accel(x)

    def jacobian(self, x):
        return np.eye(self.nq)

    def __repr__(self):
        return f"DoubleIntegrator(dim={self.nq}, mass={self.mass}, drag={self.drag}, bias={self.bias.tolist()})"


class TwoLinkArm(MechanicalSystem):
    """Planar two-link arm with point masses at the link tips, in a vertical plane.

    Joint torques are the control; the end effector is the controlled point.
    """

    nq = 2
    control_dim = 2

    def __init__(self, m1=1.0, m2=1.0, l1=1.0, l2=1.0, gravity=9.81, damping=0.0):
        self.m1, self.m2, self.l1, self.l2 = map(float, (m1, m2, l1, l2))
        self.gravity = float(gravity)
        self.damping = float(damping)

    def mass_matrix(self, q):
        m1, m2, l1, l2 = self.m1, self.m2, self.l1, self.l2
        c2 = np.cos(q[1])
        m11 = (m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2 * c2
        m12 = m2 * l2**2 + m2 * l1 * l2 * c2
        return np.array([[m11, m12], [m12, m2 * l2**2]])

    def bias_forces(self, q, dq):
        m1, m2, l1, l2, gr = self.m1, self.m2, self.l1, self.l2, self.gravity
        hh = m2 * l1 * l2 * np.sin(q[1])
        cor = np.array([-hh * (2 * dq[0] * dq[1] + dq[1] ** 2), hh * dq[0] ** 2])
        c1, c12 = np.cos(q[0]), np.cos(q[0] + q[1])
        grav = np.array([(m1 + m2) * gr * l1 * c1 + m2 * gr * l2 * c12, m2 * gr * l2 * c12])
        return cor + grav + self.damping * dq

    def joint_accel(self, x):
        q, dq = self.split(x)
        Minv = np.linalg.inv(self.mass_matrix(q))
        return -Minv @ self.bias_forces(q, dq), Minv

    def jacobian(self, x):
        q, _ = self.split(x)
        l1, l2 = self.l1, self.l2
        s1, s12 = np.sin(q[0]), np.sin(q[0] + q[1])
        c1, c12 = np.cos(q[0]), np.cos(q[0] + q[1])
        return np.array([[-l1 * s1 - l2 * s12, -l2 * s12], [l1 * c1 + l2 * c12, l2 * c12]])

    def point(self, x):
        q, dq = self.split(x)
        p = np.array(
            [
                self.l1 * np.cos(q[0]) + self.l2 * np.cos(q[0] + q[1]),
                self.l1 * np.sin(q[0]) + self.l2 * np.sin(q[0] + q[1]),
            ]
        )
        return p, self.jacobian(x) @ dq

    def point_accel(self, x):
        q, dq = self.split(x)
        qdd_f, qdd_g = self.joint_accel(x)
        J = self.jacobian(x)
        w1, w12 = dq[0], dq[0] + dq[1]
        s1, s12 = np.sin(q[0]), np.sin(q[0] + q[1])
        c1, c12 = np.cos(q[0]), np.cos(q[0] + q[1])
        jdot_dq = np.array(
            [
                -self.l1 * c1 * w1**2 - self.l2 * c12 * w12**2,
                -self.l1 * s1 * w1**2 - self.l2 * s12 * w12**2,
            ]
        )
        return J @ qdd_f + jdot_dq, J @ qdd_g

    def __repr__(self):
        return f"TwoLinkArm(m1={self.m1}, m2={self.m2}, l1={self.l1}, l2={self.l2}, gravity={self.gravity})"


class ZeroModel:
    """Nominal model that knows the kinematics of ``like`` but none of its dynamics."""

    zero = True

    def __init__(self, like: MechanicalSystem):
        self.like = like
        self.control_dim = like.control_dim
        self.nq = like.nq

    def point(self, x):
        return self.like.point(x)

    def jacobian(self, x):
        return self.like.jacobian(x)

    def point_accel(self, x):
        return np.zeros(self.nq), np.zeros((self.nq, self.control_dim))

    def __repr__(self):
        return f"ZeroModel({self.like!r})"


def rk4_step(system, x, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with the control held constant."""
    x = np.asarray(x, dtype=float)
    k1 = system.dynamics(x, u)
    k2 = system.dynamics(x + 0.5 * dt * k1, u)
    k3 = system.dynamics(x + 0.5 * dt * k2, u)
    k4 = system.dynamics(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def lipschitz_probe(system, lo, hi, n: int = 50, eps: float = 1e-6, seed: int = 0) -> float:
    """Largest finite-difference Jacobian norm of ``f`` and ``g`` over random points in a box."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    worst = 0.0
    for _ in range(n):
        x = rng.uniform(lo, hi)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = eps
            df = (system.f(x + e) - system.f(x - e)) / (2 * eps)
            dg = (system.g(x + e) - system.g(x - e)) / (2 * eps)
            worst = max(worst, np.linalg.norm(df), np.linalg.norm(dg))
    return worst


@dataclass
class PlantPair:
    true: MechanicalSystem
    nominal: object
    dt: float = 0.01

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.true.control_dim != self.nominal.control_dim:
            raise ValueError("true and nominal plants disagree on control dimension")

    @property
    def control_dim(self) -> int:
        return self.true.control_dim

    def step(self, x, u) -> np.ndarray:
        return rk4_step(self.true, x, u, self.dt)


def bundled_plants() -> dict:
    """Catalog of the bundled true/nominal plant pairs."""
    return {
        "double_integrator": PlantPair(
            DoubleIntegrator(2, mass=1.4, drag=0.6, bias=(0.0, -3.0)), DoubleIntegrator(2), 0.01
        ),
        "double_integrator_zero_nominal": PlantPair(
            DoubleIntegrator(2, mass=1.4, drag=0.6, bias=(0.0, -3.0)),
            ZeroModel(DoubleIntegrator(2)),
            0.01,
        ),
        "two_link_arm": PlantPair(
            TwoLinkArm(m1=1.3, m2=0.8, damping=0.2), TwoLinkArm(m1=1.0, m2=1.0), 0.005
        ),
    }
