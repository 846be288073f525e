"""Command-line entry points: ``train``, ``run`` and ``compare``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure or
divergence, 4 failed expectation under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .estimator import AFVSGPRegressor
from .plants import DoubleIntegrator, PlantPair, ZeroModel
from .safety_filter import BetaConfig
from .simulation import (
    DEFAULT_EXPECTATIONS,
    DivergenceError,
    check_expectation,
    collect_data,
    compare_methods,
    comparison_table,
    make_scenario,
    run_episode,
)
from .sparse_gp import NumericalError, collapsed_bound

log = logging.getLogger("afvsgp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STRICT = 0, 2, 3, 4


def build_scenario(cfg: io.RunConfig):
    sc = make_scenario(cfg.scenario)
    pair = sc.plant
    true = pair.true
    if any(v is not None for v in (cfg.true_mass, cfg.true_drag, cfg.true_bias)):
        if not isinstance(true, DoubleIntegrator):
            raise io.ConfigError("true_mass/true_drag/true_bias only apply to double-integrator scenarios")
        true = DoubleIntegrator(
            true.nq,
            mass=true.mass if cfg.true_mass is None else cfg.true_mass,
            drag=true.drag if cfg.true_drag is None else cfg.true_drag,
            bias=true.bias if cfg.true_bias is None else cfg.true_bias,
        )
    nominal = ZeroModel(pair.nominal) if cfg.nominal == "zero" else pair.nominal
    dt = pair.dt if cfg.dt is None else cfg.dt
    sc = replace(sc, plant=PlantPair(true, nominal, dt))
    if cfg.duration is not None:
        sc = replace(sc, duration=cfg.duration)
    if cfg.noise_std is not None:
        sc = replace(sc, noise_std=cfg.noise_std)
    return sc


def make_learner(cfg: io.RunConfig, control_dim: int) -> AFVSGPRegressor:
    return AFVSGPRegressor(
        control_dim=control_dim,
        n_inducing=cfg.M,
        phi=cfg.phi,
        epsilon=cfg.epsilon,
        max_inducing=cfg.M_max,
        noise=cfg.noise,
        signal_variance=cfg.signal_variance,
        lengthscale=cfg.lengthscale,
        restarts=cfg.restarts,
        max_iter=cfg.max_iter,
        min_residual=cfg.min_residual,
        random_state=cfg.seed,
    )


def beta_value(cfg: io.RunConfig, P: int) -> float:
    return BetaConfig(cfg.delta, cfg.rkhs_bound, cfg.info_gain, cfg.beta).value(P)


def _out(args, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(args.out) / p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: io.RunConfig, args) -> int:
    sc = build_scenario(cfg)
    X, z = collect_data(sc, cfg.P, seed=cfg.seed, excitation=cfg.excitation)
    est = make_learner(cfg, sc.control_dim).fit(X, z)
    path = io.save_snapshot(est.state_, args.snapshot or _out(args, cfg.snapshot_path))
    st = est.state_
    print(f"bound {collapsed_bound(st):.10g}")
    print(f"noise {st.noise:.10g}")
    for i, k in enumerate(st.kernel.base_kernels):
        ls = " ".join(f"{v:.6g}" for v in k.lengthscales)
        print(f"kernel[{i}] signal_variance {k.signal_variance:.6g} lengthscales {ls}")
    print(f"inducing {st.M} window {len(st.window)}")
    print(f"snapshot {path}")
    return EXIT_OK


def cmd_run(cfg: io.RunConfig, args) -> int:
    sc = build_scenario(cfg)
    learner = None
    if args.snapshot:
        state = io.load_snapshot(args.snapshot)
        learner = AFVSGPRegressor.from_state(
            state, epsilon=cfg.epsilon, max_inducing=cfg.M_max, min_residual=cfg.min_residual
        )
    P = learner.state_.P if learner is not None else cfg.P
    beta = beta_value(cfg, P)
    m = sc.spec.m
    trace_path = _out(args, cfg.trace_path)
    code = EXIT_OK
    with io.TraceWriter(trace_path, 2 * sc.plant.true.nq, sc.control_dim, m) as writer:
        try:
            trace = run_episode(sc, learner, beta=beta, learn=cfg.learn, seed=cfg.seed,
                                method="afvsgp" if learner is not None else "nominal",
                                on_record=writer)
        except DivergenceError as err:
            trace = err.trace
            code = EXIT_NUMERICAL
            print(f"error: {err}", file=sys.stderr)
    summary = trace.summary(sc.switch_time)
    summary["beta"] = beta
    summary["beta_theory"] = BetaConfig(cfg.delta, cfg.rkhs_bound, cfg.info_gain).theoretical(P)
    summary["trace"] = str(trace_path)
    io.write_summary(summary, _out(args, cfg.summary_path))
    print(f"min_h {summary['min_h']:.6g} mse {summary['mse']:.6g} steps {summary['steps']}")
    return code


def cmd_compare(cfg: io.RunConfig, args) -> int:
    sc = build_scenario(cfg)
    if sc.switch_time is None:
        raise io.ConfigError("compare needs a scenario with a regime switch")
    per_seed = []
    for s in range(cfg.seed, cfg.seed + cfg.compare_seeds):
        per_seed.append(
            compare_methods(sc, seed=s, P=cfg.P, M=cfg.M, phi=cfg.phi, epsilon=cfg.epsilon,
                            n_offline=cfg.n_offline, n_dense=cfg.n_dense, restarts=cfg.restarts,
                            max_iter=cfg.max_iter, excitation=cfg.excitation)
        )
    table = comparison_table(per_seed)
    path = _out(args, cfg.compare_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(table)
    width = max(len(r[0]) for r in table)
    for row in table:
        print(" | ".join([row[0].ljust(width)] + row[1:]))
    failed = 0
    for text in cfg.expect or DEFAULT_EXPECTATIONS:
        held = sum(check_expectation(r, text) for r in per_seed)
        ok = held == len(per_seed)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {text} ({held}/{len(per_seed)} seeds)")
    if failed and args.strict:
        return EXIT_STRICT
    return EXIT_OK


COMMANDS = {"train": cmd_train, "run": cmd_run, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afvsgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        p.add_argument("--snapshot", help="model snapshot to write (train) or read (run)")
        p.add_argument("--out", default=".", help="directory for relative output paths")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--strict", action="store_true", help="nonzero exit on failed expectations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = io.load_config(args.config) if args.config else io.RunConfig().validate()
        if args.seed is not None:
            if args.seed < 0:
                raise io.ConfigError("seed must be nonnegative")
            cfg = replace(cfg, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except io.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
