"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the report.
"""

import copy
import time

import numpy as np
import pytest

from afvsgp import io
from afvsgp.estimator import AFVSGPRegressor
from afvsgp.hocbf import BarrierSpec, CircularObstacle, measure_discrepancy, nominal_constraint
from afvsgp.kernels import gram
from afvsgp.online import AdaptationConfig, add_inducing, ingest_sample, remove_inducing, step
from afvsgp.plants import DoubleIntegrator, bundled_plants, rk4_step
from afvsgp.safety_filter import ACTIVE, compute_beta, kkt_residuals, solve
from afvsgp.simulation import check_expectation, collect_data, compare_methods, make_scenario, run_episode
from afvsgp.sparse_gp import ModelState, TrainingWindow, batch_caches, predict_mean_var

from conftest import random_data, random_kernel, random_state, rel_fro
from oracles import beta_reference, grid_polish, random_active_instance


def test_c01_dense_oracle_equivalence(criterion):
    tic = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for P in (10, 25, 40):
        kernel = random_kernel(rng, control_dim=2, input_dim=3)
        xi, ubar, z = random_data(rng, P, control_dim=2, input_dim=3)
        noise = 0.05
        st = ModelState(kernel, noise, 1.0, TrainingWindow(P, xi, ubar, z), xi, ubar)
        xs, us, _ = random_data(rng, 10, control_dim=2, input_dim=3)
        mean, var = predict_mean_var(st, xs, us)
        K = gram(kernel, xi, ubar) + noise * np.eye(P)
        Ks = gram(kernel, xs, us, xi, ubar)
        d_mean = Ks @ np.linalg.solve(K, z)
        d_var = np.diag(gram(kernel, xs, us)) - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
        worst = max(worst, np.abs(mean - d_mean).max(), np.abs(var - d_var).max())
    elapsed = time.perf_counter() - tic
    criterion(1, "dense GP equivalence", worst < 1e-6 and elapsed < 5,
              f"max |diff| {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 5 s)")


def test_c02_incremental_exactness(criterion):
    tic = time.perf_counter()
    rng = np.random.default_rng(102)
    st = random_state(rng, P=100, M=15, phi=0.98)
    xi, ubar, z = random_data(rng, 200)
    worst = {"B": 0.0, "Kuu_inv": 0.0, "zLK": 0.0}
    inserts = evictions = 0
    for i in range(200):
        ingest_sample(st, xi[i], ubar[i], z[i])
        if rng.random() < 0.3:
            M0 = st.M
            add_inducing(st, xi[i], ubar[i])
            inserts += st.M > M0
        if st.M > 5 and rng.random() < 0.3:
            remove_inducing(st, int(rng.integers(st.M)))
            evictions += 1
        ref = batch_caches(st.kernel, st.noise, st.phi, st.window, st.xi_o, st.ubar_o,
                           st.y_mean, st.y_scale)
        for name in worst:
            worst[name] = max(worst[name], rel_fro(getattr(st, name), ref[name]))
    elapsed = time.perf_counter() - tic
    err = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(2, "incremental caches vs batch", err < 1e-8 and elapsed < 30 and st.fallbacks == 0,
              f"{detail} (< 1e-8) over {inserts} insertions/{evictions} evictions, "
              f"{st.fallbacks} fallbacks, {elapsed:.1f} s (< 30 s)")


def _mean_step_time(st, cfg, xi, ubar, z):
    times = np.empty(len(z))
    for i in range(len(z)):
        tic = time.perf_counter()
        step(st, xi[i], ubar[i], z[i], cfg)
        times[i] = time.perf_counter() - tic
    return float(times.mean())


def test_c03_constant_cost_per_step(criterion):
    tic = time.perf_counter()
    rng = np.random.default_rng(103)
    base = random_state(rng, P=100, M=15, phi=0.98)
    cfg = AdaptationConfig(epsilon=0.5, M_max=15)
    xi, ubar, z = random_data(rng, 10_000)
    _mean_step_time(copy.deepcopy(base), cfg, xi[:200], ubar[:200], z[:200])  # warm-up
    short = _mean_step_time(copy.deepcopy(base), cfg, xi[:1000], ubar[:1000], z[:1000])
    long_state = copy.deepcopy(base)
    long = _mean_step_time(long_state, cfg, xi, ubar, z)
    ratio = long / short
    elapsed = time.perf_counter() - tic
    ok = 0.5 <= ratio <= 2.0 and elapsed < 120 and long_state.M <= 15
    criterion(3, "per-step cost independent of stream length", ok,
              f"mean step {1e3 * short:.3f} ms at 1e3 vs {1e3 * long:.3f} ms at 1e4, "
              f"ratio {ratio:.2f} (within 2x), {elapsed:.1f} s (< 120 s)")


def test_c04_bordered_inverse(criterion):
    rng = np.random.default_rng(104)
    rel, absolute, n = [], [], 0
    while n < 100:
        st = random_state(rng, P=60, M=int(rng.integers(3, 8)), phi=0.98)
        xi, ubar, z = random_data(rng, 10)
        for j in range(10):
            ingest_sample(st, xi[j], ubar[j], z[j])
            M0 = st.M
            add_inducing(st, xi[j], ubar[j])
            if st.M == M0 or n >= 100:
                continue
            n += 1
            direct = np.linalg.inv(st.Kuu + st.S / st.noise)
            rel.append(rel_fro(st.B, direct))
            absolute.append(np.linalg.norm(st.B - direct))
    worst = max(rel)
    criterion(4, "bordered inverse vs direct inversion", worst < 1e-8,
              f"{n} insertions, max relative Frobenius {worst:.1e} (< 1e-8); "
              f"max absolute {max(absolute):.1e}")


def test_c05_socp_optimality(criterion):
    tic = time.perf_counter()
    rng = np.random.default_rng(105)
    worst_kkt, worst_gap, n_active = 0.0, 0.0, 0
    for i in range(100):
        p, u_max = random_active_instance(rng, 1 + i % 3)
        r = solve(p)
        n_active += r.status == ACTIVE
        k = kkt_residuals(p, r)
        kkt = max(k["stationarity"], max(-k["primal"], 0.0), k["complementarity"], max(-k["lam"], 0.0))
        worst_kkt = max(worst_kkt, kkt)
        _, best = grid_polish(p, u_max)
        worst_gap = max(worst_gap, abs(p.objective(r.u) - best))
    elapsed = time.perf_counter() - tic
    ok = worst_kkt < 1e-6 and worst_gap < 1e-4 and n_active == 100 and elapsed < 60
    criterion(5, "robust QP solver optimality", ok,
              f"{n_active}/100 active, max KKT residual {worst_kkt:.1e} (< 1e-6), "
              f"max objective gap {worst_gap:.1e} (< 1e-4), {elapsed:.1f} s (< 60 s)")


def test_c06_closed_loop_safety(criterion):
    tic = time.perf_counter()
    seed = 0
    sc = make_scenario("dynamic_obstacle")
    nominal = run_episode(sc, None, seed=seed)
    X, z = collect_data(sc, 200, seed=seed)
    est = AFVSGPRegressor(control_dim=2, n_inducing=20, max_inducing=30, restarts=1,
                          max_iter=150, random_state=seed).fit(X, z)
    learned = run_episode(sc, est, beta=2.0, seed=seed)
    elapsed = time.perf_counter() - tic
    ok = nominal.min_h < 0 <= learned.min_h and elapsed < 60
    criterion(6, "dynamic obstacle safety", ok,
              f"no learning min h {nominal.min_h:.4f} (< 0), AFVSGP beta=2 min h "
              f"{learned.min_h:.4f} (>= 0), {elapsed:.1f} s (< 60 s)")


@pytest.mark.slow
def test_c07_adaptivity_ordering(criterion):
    held, rows = 0, []
    checks = ("afvsgp<vsgp", "vsgp<dense", "afvsgp.time<vsgp.time")
    for seed in range(10):
        res = compare_methods(seed=seed)
        ok = all(check_expectation(res, c) for c in checks)
        held += ok
        rows.append(f"seed {seed}: " + " ".join(
            f"{k}={res[k].mse_post:.3g}/{1e3 * res[k].mean_update_s:.2f}ms" for k in ("afvsgp", "vsgp", "dense")
        ) + ("" if ok else " (ordering broken)"))
    print("\n".join(rows))
    criterion(7, "regime-switch ordering", held >= 9,
              f"AFVSGP < VSGP < dense MSE and AFVSGP faster on {held}/10 seeds (>= 9)")


def _measurement_errors(spec, true, nominal, x0, u, dts):
    errs = []
    for dt in dts:
        s = measure_discrepancy(spec, nominal, x0, rk4_step(true, x0, u, dt), u, dt)
        exact = (nominal_constraint(spec, true, s.state, s.t).value(s.ubar)
                 - nominal_constraint(spec, nominal, s.state, s.t).value(s.ubar))
        errs.append(abs(s.z - exact))
    return np.array(errs)


def test_c08_measurement_convergence(criterion):
    dts = 4e-3 / 2.0 ** np.arange(4)
    spec = BarrierSpec(CircularObstacle((0.0, 1.5), 0.5), (3.0, 3.0))
    di = _measurement_errors(spec, DoubleIntegrator(2, mass=1.5, drag=0.8, bias=(0.3, -1.0)),
                             DoubleIntegrator(2), np.array([0.2, -0.1, 0.6, 0.4]),
                             np.array([0.5, -0.3]), dts)
    arm = bundled_plants()["two_link_arm"]
    q0 = np.array([0.3, 1.2, 0.4, -0.3])
    p0 = arm.true.point(q0)[0]
    arm_spec = BarrierSpec(CircularObstacle(p0 + np.array([0.0, 0.5]), 0.25), (3.0, 3.0))
    ar = _measurement_errors(arm_spec, arm.true, arm.nominal, q0, np.array([1.0, -0.5]), dts)
    ratios = np.r_[di[:-1] / di[1:], ar[:-1] / ar[1:]]
    criterion(8, "midpoint measurement convergence", bool(np.all(ratios >= 3.0)),
              "error ratios per halving " + " ".join(f"{r:.2f}" for r in ratios) + " (>= 3)")


def test_c09_beta_formula(criterion):
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(5):
        delta, b, k, P = rng.uniform(1e-3, 0.5), rng.uniform(0, 5), rng.uniform(0, 10), int(rng.integers(1, 10_000))
        ref = beta_reference(delta, b, k, P)
        worst = max(worst, float(abs((compute_beta(delta, b, k, P) - ref) / ref)))
    criterion(9, "beta formula vs high precision", worst < 1e-12,
              f"max relative error {worst:.1e} (< 1e-12 for 12 significant digits)")


def _round_trip_change(est, probes):
    back = AFVSGPRegressor.from_state(io.state_from_dict(io.state_to_dict(est.state_)))
    m0, s0 = est.predict(probes, return_std=True)
    m1, s1 = back.predict(probes, return_std=True)
    return max(np.abs(m0 - m1).max(), np.abs(s0**2 - s1**2).max())


def test_c10_persistence_round_trip(criterion, tmp_path):
    sc = make_scenario("dynamic_obstacle")
    X, z = collect_data(sc, 150, seed=10)
    est = AFVSGPRegressor(control_dim=2, n_inducing=15, max_inducing=20, restarts=1,
                          max_iter=150, epsilon=0.05).fit(X[:100], z[:100])
    path = io.save_snapshot(est.state_, tmp_path / "model.json")
    back = AFVSGPRegressor.from_state(io.load_snapshot(path))
    probes = X[np.random.default_rng(110).choice(len(X), 10, replace=False)]
    m0, s0 = est.predict(probes, return_std=True)
    m1, s1 = back.predict(probes, return_std=True)
    diff = max(np.abs(m0 - m1).max(), np.abs(s0**2 - s1**2).max())
    # informational: after streaming, the rebuilt caches differ from the
    # incremental ones by rounding, amplified by the conditioning of K_oo
    est.partial_fit(X[100:], z[100:])
    streamed = _round_trip_change(est, probes)
    criterion(10, "snapshot round trip", diff < 1e-10,
              f"max change in predictive mean/variance {diff:.1e} at 10 probes (< 1e-10); "
              f"after 50 streamed updates {streamed:.1e}")
