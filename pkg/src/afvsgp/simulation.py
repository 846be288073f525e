"""Closed-loop experiments: scenarios, the per-step learning/filtering loop, comparisons."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .estimator import AFVSGPRegressor, DenseGPRegressor, SparseGPRegressor
from .hocbf import (
    BarrierSpec,
    CircularObstacle,
    assemble_uncertain_constraint,
    measure_discrepancy,
    measured_psi,
    nominal_constraint,
    RobustConstraint,
)
from .plants import DoubleIntegrator, PlantPair, TwoLinkArm, ZeroModel, bundled_plants
from .safety_filter import INFEASIBLE, SafetyProblem, solve
from .sparse_gp import Prediction

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The simulated state became non-finite or left the operating region."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# references and obstacle motion
# ---------------------------------------------------------------------------


def oscillation(center, axis, amplitude: float, period: float, phase: float = 0.0):
    """``t -> (p, v, a)`` for a sinusoid along ``axis`` about ``center``."""
    c = np.asarray(center, dtype=float)
    ax = np.asarray(axis, dtype=float)
    w = 2 * np.pi / period

    def ref(t):
        s, co = np.sin(w * t + phase), np.cos(w * t + phase)
        return c + amplitude * s * ax, amplitude * w * co * ax, -amplitude * w**2 * s * ax

    return ref


def switched(before, after, t_switch: float):
    return lambda t: before(t) if t < t_switch else after(t)


def linear_motion(start, velocity):
    """Obstacle centre moving at constant velocity."""
    s = np.asarray(start, dtype=float)
    v = np.asarray(velocity, dtype=float)
    return lambda t: (s + v * t, v, np.zeros_like(v))


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    plant: PlantPair
    spec: BarrierSpec
    reference: Callable
    x0: np.ndarray
    duration: float
    kp: float = 4.0
    kd: float = 4.0
    noise_std: float = 0.0
    switch_time: float | None = None
    switched_true: object = None
    u_limit: float | None = None

    @property
    def dt(self) -> float:
        return self.plant.dt

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def control_dim(self) -> int:
        return self.plant.control_dim

    def true_plant(self, t: float):
        if self.switch_time is not None and self.switched_true is not None and t >= self.switch_time:
            return self.switched_true
        return self.plant.true

    def features(self, x, t: float) -> np.ndarray:
        """Learner input: point position relative to the obstacle and point velocity."""
        p, v = self.plant.true.point(x)
        c = self.spec.barrier.center(t)[0]
        return np.r_[p - c, v]

    def feature_dim(self) -> int:
        return 2 * self.plant.true.nq

    def nominal_control(self, x, t: float) -> np.ndarray:
        """Task-space PD tracking of the reference through the nominal model.

        A zeroed nominal model has no inverse dynamics; it falls back to a
        Jacobian-transpose PD law.
        """
        p_ref, v_ref, a_ref = self.reference(t)
        nom = self.plant.nominal
        p, v = nom.point(x)
        a_des = a_ref + self.kp * (p_ref - p) + self.kd * (v_ref - v)
        if getattr(nom, "zero", False):
            u = nom.jacobian(x).T @ (a_des - a_ref)
        else:
            a_f, a_g = nom.point_accel(x)
            u = np.linalg.lstsq(a_g, a_des - a_f, rcond=None)[0]
        if self.u_limit is not None:
            u = np.clip(u, -self.u_limit, self.u_limit)
        return u

    def h(self, x, t: float) -> float:
        return float(self.spec.barrier.chain(x, t, self.plant.true)[0])

    def psi(self, x, t: float) -> np.ndarray:
        """Measured ``psi_0 .. psi_{m-1}``."""
        derivs = self.spec.barrier.chain(x, t, self.plant.true)
        return np.array([self.spec.coefficients(i) @ derivs[: i + 1] for i in range(self.spec.m)])

    def true_discrepancy(self, x, t: float, ubar) -> float:
        true_row = nominal_constraint(self.spec, self.true_plant(t), x, t)
        nom_row = nominal_constraint(self.spec, self.plant.nominal, x, t)
        return true_row.value(ubar) - nom_row.value(ubar)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class TraceRecord:
    t: float
    x: np.ndarray
    u_nom: np.ndarray
    u: np.ndarray
    h: float
    psi: np.ndarray
    z: float
    pred_mean: float
    pred_var: float
    P_th: float
    M_size: int
    solver_status: str
    step_ms: float
    update_ms: float = 0.0
    event: dict = field(default_factory=dict)


@dataclass
class Trace:
    records: list = field(default_factory=list)
    method: str = ""
    failed: str | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def min_h(self) -> float:
        return float(self.column("h").min()) if self.records else float("nan")

    def mse(self, start: float = -np.inf) -> float:
        rows = [r for r in self.records if r.t >= start]
        err = np.array([r.z - r.pred_mean for r in rows])
        return float(np.mean(err**2)) if err.size else float("nan")

    def summary(self, switch_time: float | None = None) -> dict:
        status = self.column("solver_status") if self.records else np.array([])
        step_ms = self.column("step_ms") if self.records else np.array([np.nan])
        upd = self.column("update_ms") if self.records else np.array([np.nan])
        events = [r.event for r in self.records]
        out = {
            "method": self.method,
            "steps": len(self),
            "min_h": self.min_h,
            "violations": int((self.column("h") < 0).sum()) if self.records else 0,
            "mse": self.mse(),
            "mean_step_ms": float(np.mean(step_ms)),
            "max_step_ms": float(np.max(step_ms)),
            "mean_update_ms": float(np.mean(upd)),
            "inserts": sum(bool(e.get("inserted")) for e in events),
            "evictions": sum(e.get("evicted") is not None for e in events),
            "fallbacks": sum(bool(e.get("fallback")) for e in events),
            "infeasible": int((status == INFEASIBLE).sum()),
            "failed": self.failed,
        }
        if switch_time is not None:
            out["mse_post_switch"] = self.mse(switch_time)
        return out


# ---------------------------------------------------------------------------
# episode
# ---------------------------------------------------------------------------


def _predict(learner, xi):
    if learner is None:
        return None
    b, S = learner.predict_affine(xi[None])
    return Prediction(b[0], S[0])


def run_episode(
    scenario: Scenario,
    learner=None,
    beta: float = 2.0,
    learn: bool = True,
    use_filter: bool = True,
    seed: int = 0,
    excitation: float = 0.0,
    steps: int | None = None,
    t0: float = 0.0,
    method: str = "",
    on_record: Callable | None = None,
) -> Trace:
    """Run the closed loop: nominal PD, safety filter, true-plant step, measurement, learning.

    ``learner`` is a fitted discrepancy regressor (or ``None`` for the nominal
    filter). With ``learn`` the new measurement is streamed into it after each
    step. ``excitation`` adds Gaussian noise to the applied control, which is
    useful when collecting preliminary data. ``on_record`` is called with each
    record as soon as it is complete.
    """
    rng = np.random.default_rng(seed)
    spec, nom = scenario.spec, scenario.plant.nominal
    dt = scenario.dt
    x = np.asarray(scenario.x0, dtype=float).copy()
    trace = Trace(method=method)
    n = scenario.steps if steps is None else steps
    m = scenario.control_dim
    for k in range(n):
        t = t0 + k * dt
        tic = time.perf_counter()
        u_nom = scenario.nominal_control(x, t)
        xi_now = scenario.features(x, t)
        pred = _predict(learner, xi_now)
        status = "off"
        u = u_nom
        if use_filter:
            row = nominal_constraint(spec, nom, x, t)
            if pred is None:
                con = RobustConstraint(row.F_row, row.offset, np.zeros((m + 1, m + 1)), 0.0)
            else:
                con = assemble_uncertain_constraint(row, pred, beta)
            res = solve(SafetyProblem.from_constraint(con, u_nom))
            u, status = res.u, res.status
        u_applied = u + (excitation * rng.standard_normal(m) if excitation > 0 else 0.0)
        x_next = rk4_true(scenario, x, u_applied, t)
        if not np.all(np.isfinite(x_next)) or np.abs(x_next).max() > 1e6:
            trace.failed = f"state diverged at t={t:.3f}"
            raise DivergenceError(trace.failed, trace)
        sample = measure_discrepancy(spec, nom, x, x_next, u_applied, dt, t)
        z = sample.z + (scenario.noise_std * rng.standard_normal() if scenario.noise_std else 0.0)
        xi_j = scenario.features(sample.state, sample.t)
        if learner is not None:
            mean, var = learner.predict(np.r_[xi_j, u_applied][None], return_std=True)
            mean, var = float(mean[0]), float(var[0]) ** 2
        else:
            mean, var = 0.0, 0.0
        upd_ms, event, P_th, M_size = 0.0, {}, float("nan"), 0
        if learner is not None:
            if learn:
                t_up = time.perf_counter()
                learner.partial_fit(np.r_[xi_j, u_applied][None], [z])
                upd_ms = 1e3 * (time.perf_counter() - t_up)
                event = dict(getattr(learner, "last_event", {}) or {})
            st = getattr(learner, "state_", None)
            if st is not None:
                M_size = st.M
                P_th = float(event.get("P_th", np.nan))
        step_ms = 1e3 * (time.perf_counter() - tic)
        trace.records.append(
            TraceRecord(
                t, x.copy(), np.asarray(u_nom, dtype=float).copy(), np.asarray(u_applied, dtype=float).copy(),
                scenario.h(x, t), scenario.psi(x, t), z, mean, var, P_th, M_size, status,
                step_ms, upd_ms, event,
            )
        )
        if on_record is not None:
            on_record(trace.records[-1])
        x = x_next
    return trace


def rk4_true(scenario: Scenario, x, u, t: float):
    from .plants import rk4_step

    return rk4_step(scenario.true_plant(t), x, u, scenario.dt)


def collect_data(scenario: Scenario, steps: int, seed: int = 0, excitation: float = 1.0, t0: float = 0.0):
    """Preliminary ``(X, z)`` from an unfiltered, excited run of the scenario."""
    X, z, _ = generate_stream(scenario, steps, seed=seed, excitation=excitation, t0=t0)
    return X, z


def generate_stream(scenario: Scenario, steps: int, seed: int = 0, excitation: float = 1.0, t0: float = 0.0):
    """Open-loop (unfiltered) measurement stream ``(X, z, z_true)`` along the reference."""
    rng = np.random.default_rng(seed)
    x = np.asarray(scenario.x0, dtype=float).copy()
    dt, m = scenario.dt, scenario.control_dim
    X, Z, Zt = [], [], []
    for k in range(steps):
        t = t0 + k * dt
        u = scenario.nominal_control(x, t) + excitation * rng.standard_normal(m)
        x_next = rk4_true(scenario, x, u, t)
        s = measure_discrepancy(scenario.spec, scenario.plant.nominal, x, x_next, u, dt, t)
        X.append(np.r_[scenario.features(s.state, s.t), u])
        Z.append(s.z + (scenario.noise_std * rng.standard_normal() if scenario.noise_std else 0.0))
        Zt.append(scenario.true_discrepancy(s.state, s.t, s.ubar))
        x = x_next
    return np.array(X), np.array(Z), np.array(Zt)


# ---------------------------------------------------------------------------
# bundled scenarios
# ---------------------------------------------------------------------------


def _di_spec(center, radius, gains=(2.0, 2.0)):
    return BarrierSpec(CircularObstacle(center, radius), gains)


def dynamic_obstacle_scenario(nominal: str = "model") -> Scenario:
    """Mismatched double integrator; an obstacle rises toward the reference path.

    The true plant is heavier, has drag and is pushed down (toward the
    obstacle) by a constant force the nominal model does not know about.
    """
    plants = bundled_plants()
    pair = plants["double_integrator" if nominal == "model" else "double_integrator_zero_nominal"]
    ref = oscillation((0.0, 0.0), (1.0, 0.0), 1.5, 6.0)
    spec = _di_spec(linear_motion((0.0, -2.2), (0.0, 0.5)), 0.5, gains=(3.0, 3.0))
    return Scenario("dynamic_obstacle", pair, spec, ref, np.zeros(4), duration=6.0,
                    kp=6.0, kd=5.0, noise_std=0.01)


def static_obstacle_scenario() -> Scenario:
    plants = bundled_plants()
    ref = oscillation((0.0, 0.0), (1.0, 0.0), 1.5, 6.0)
    spec = _di_spec((0.0, 0.9), 0.5)
    return Scenario("static_obstacle", plants["double_integrator"], spec, ref, np.zeros(4),
                    duration=6.0, kp=6.0, kd=5.0, noise_std=0.01)


def circle(center, radius: float, period: float, direction: float = 1.0):
    """``t -> (p, v, a)`` going round a circle in the plane."""
    c = np.asarray(center, dtype=float)
    w = direction * 2 * np.pi / period

    def ref(t):
        s, co = np.sin(w * t), np.cos(w * t)
        return (c + radius * np.array([co, s]), radius * w * np.array([-s, co]),
                -radius * w**2 * np.array([co, s]))

    return ref


def regime_switch_scenario(switch_time: float = 10.0, duration: float = 15.0) -> Scenario:
    """Circling near an obstacle; at ``switch_time`` a payload makes the plant heavier
    and the reference shifts and reverses direction."""
    plants = bundled_plants()
    pair = plants["double_integrator"]
    before = circle((0.0, 0.0), 1.0, 2.5)
    after = circle((0.0, 0.3), 0.8, 2.0, direction=-1.0)
    spec = _di_spec((0.0, 2.5), 0.5)
    loaded = DoubleIntegrator(2, mass=2.4, drag=1.2, bias=(1.0, -5.0))
    return Scenario("regime_switch", pair, spec, switched(before, after, switch_time), np.zeros(4),
                    duration=duration, kp=6.0, kd=5.0, noise_std=0.01,
                    switch_time=switch_time, switched_true=loaded)


def arm_scenario() -> Scenario:
    pair = bundled_plants()["two_link_arm"]
    q0 = np.array([0.3, 1.2])
    p0 = pair.true.point(np.r_[q0, 0.0, 0.0])[0]
    ref = oscillation(p0, (1.0, 0.0), 0.4, 4.0)
    spec = BarrierSpec(CircularObstacle(p0 + np.array([0.0, 0.5]), 0.25), (3.0, 3.0))
    return Scenario("two_link_arm", pair, spec, ref, np.r_[q0, 0.0, 0.0], duration=4.0,
                    kp=25.0, kd=10.0, noise_std=0.0)


SCENARIOS = {
    "dynamic_obstacle": dynamic_obstacle_scenario,
    "static_obstacle": static_obstacle_scenario,
    "regime_switch": regime_switch_scenario,
    "two_link_arm": arm_scenario,
}


def make_scenario(name: str, **overrides) -> Scenario:
    try:
        sc = SCENARIOS[name]()
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return replace(sc, **overrides) if overrides else sc


# ---------------------------------------------------------------------------
# method comparison on a regime-switch stream
# ---------------------------------------------------------------------------


@dataclass
class MethodResult:
    name: str
    mse_post: float
    mse_pre: float
    mean_update_s: float
    predictions: np.ndarray = field(repr=False, default=None)


def _stream_eval(est, X, z, learn: bool):
    preds = np.empty(len(z))
    times = []
    for i in range(len(z)):
        preds[i] = est.predict(X[i : i + 1])[0]
        if learn:
            tic = time.perf_counter()
            est.partial_fit(X[i : i + 1], z[i : i + 1])
            times.append(time.perf_counter() - tic)
    return preds, float(np.mean(times)) if times else 0.0


def compare_methods(
    scenario: Scenario | None = None,
    seed: int = 0,
    P: int = 200,
    M: int = 20,
    phi: float = 0.98,
    epsilon: float = 0.5,
    n_offline: int = 1000,
    n_dense: int = 300,
    restarts: int = 1,
    max_iter: int = 150,
    excitation: float = 1.0,
    methods=("afvsgp", "vsgp", "dense", "none"),
) -> dict:
    """One-step-ahead discrepancy prediction on a regime-switch stream.

    Every learner is fitted on samples from before the switch (AFVSGP on the
    last ``P``, the sparse baseline on ``n_offline``, the dense GP on
    ``n_dense``). Afterwards each sample is predicted before it is revealed;
    AFVSGP and the sparse baseline then absorb it, the dense GP stays frozen.
    """
    sc = scenario or regime_switch_scenario()
    X, z, _ = generate_stream(sc, sc.steps, seed=seed, excitation=excitation)
    k_sw = int(round(sc.switch_time / sc.dt)) if sc.switch_time is not None else len(z) // 2
    m = sc.control_dim
    Xs, zs = X[k_sw:], z[k_sw:]
    out = {}
    for name in methods:
        if name == "afvsgp":
            est = AFVSGPRegressor(control_dim=m, n_inducing=M, phi=phi, epsilon=epsilon,
                                  max_inducing=M, restarts=restarts, max_iter=max_iter,
                                  random_state=seed).fit(X[k_sw - P : k_sw], z[k_sw - P : k_sw])
            learn = True
        elif name == "vsgp":
            est = SparseGPRegressor(control_dim=m, n_inducing=M, restarts=restarts,
                                    max_iter=max_iter, random_state=seed)
            est.fit(X[k_sw - n_offline : k_sw], z[k_sw - n_offline : k_sw])
            learn = True
        elif name == "dense":
            est = DenseGPRegressor(control_dim=m, restarts=restarts, max_iter=max_iter,
                                   random_state=seed)
            est.fit(X[k_sw - n_dense : k_sw], z[k_sw - n_dense : k_sw])
            learn = False
        elif name == "none":
            out[name] = MethodResult(name, float(np.mean(zs**2)), float("nan"), 0.0, np.zeros(len(zs)))
            continue
        else:
            raise ValueError(f"unknown method {name!r}")
        preds, t_up = _stream_eval(est, Xs, zs, learn)
        pre = est.predict(X[k_sw - P : k_sw])
        out[name] = MethodResult(name, float(np.mean((preds - zs) ** 2)),
                                 float(np.mean((pre - z[k_sw - P : k_sw]) ** 2)), t_up, preds)
    return out


_METRICS = {"mse": "mse_post", "time": "mean_update_s"}


def parse_expectation(text: str):
    """``"afvsgp<vsgp"`` (post-switch MSE) or ``"afvsgp.time<vsgp.time"``."""
    parts = text.replace(" ", "").split("<")
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"bad expectation {text!r}; use 'a<b' or 'a.time<b.time'")
    out = []
    for p in parts:
        name, _, metric = p.partition(".")
        metric = metric or "mse"
        if metric not in _METRICS:
            raise ValueError(f"unknown metric {metric!r} in {text!r}")
        out.append((name, _METRICS[metric]))
    return tuple(out)


def check_expectation(results: dict, text: str) -> bool:
    (a, ma), (b, mb) = parse_expectation(text)
    if a not in results or b not in results:
        raise ValueError(f"expectation {text!r} names a method that was not run")
    return getattr(results[a], ma) < getattr(results[b], mb)


DEFAULT_EXPECTATIONS = ("afvsgp<vsgp", "vsgp<dense", "afvsgp.time<vsgp.time")


def comparison_table(per_seed: list) -> list[list[str]]:
    """Rows ``Model | MSE | Update-Time`` averaged over seeds (MSE post switch, time in seconds)."""
    rows = [["Model", "MSE", "Update-Time"]]
    labels = {"afvsgp": "AFVSGP", "vsgp": "VSGP", "dense": "GP", "none": "No learning"}
    for name in per_seed[0]:
        mse = np.mean([r[name].mse_post for r in per_seed])
        upd = np.mean([r[name].mean_update_s for r in per_seed])
        rows.append([labels.get(name, name), f"{mse:.6g}", f"{upd:.6g}"])
    return rows

