"""Run configuration, model snapshots, per-step traces and run summaries.

Configs and snapshots are JSON documents; traces are CSV with a header row.
Floats are written with ``repr`` precision so values round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .kernels import kernel_from_dict, kernel_to_dict
from .simulation import SCENARIOS, Trace, TraceRecord
from .sparse_gp import ModelState, TrainingWindow

SNAPSHOT_FORMAT = "afvsgp-snapshot"
SNAPSHOT_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    scenario: str = "dynamic_obstacle"
    nominal: str = "model"
    true_mass: float | None = None
    true_drag: float | None = None
    true_bias: list | None = None
    # kernel initialization
    signal_variance: float = 1.0
    lengthscale: float = 1.0
    noise: float = 0.1
    # learner
    P: int = 200
    M: int = 20
    M_max: int = 30
    phi: float = 0.98
    epsilon: float = 1.0
    min_residual: float = 1e-6
    restarts: int = 1
    max_iter: int = 150
    # filter
    beta: float | None = 2.0
    delta: float = 0.05
    rkhs_bound: float = 1.0
    info_gain: float = 0.0
    learn: bool = True
    # simulation
    dt: float | None = None
    duration: float | None = None
    noise_std: float | None = None
    excitation: float = 1.0
    seed: int = 0
    # comparison
    compare_seeds: int = 1
    n_offline: int = 400
    n_dense: int = 300
    expect: list | None = None
    # outputs
    snapshot_path: str = "model.json"
    trace_path: str = "trace.csv"
    summary_path: str = "summary.json"
    compare_path: str = "compare.csv"

    def validate(self) -> "RunConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")
        if self.nominal not in ("model", "zero"):
            raise ConfigError("nominal must be 'model' or 'zero'")
        if not 0 < self.phi <= 1:
            raise ConfigError("phi must lie in (0, 1]")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not self.P >= self.M >= 1:
            raise ConfigError(f"need P >= M >= 1, got P={self.P}, M={self.M}")
        if self.M_max < max(2, self.M):
            raise ConfigError("M_max must be at least max(2, M)")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.duration is not None and not self.duration > 0:
            raise ConfigError("duration must be positive")
        for name in ("signal_variance", "lengthscale", "noise"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.rkhs_bound < 0 or self.info_gain < 0:
            raise ConfigError("rkhs_bound and info_gain must be nonnegative")
        if self.noise_std is not None and self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.excitation < 0:
            raise ConfigError("excitation must be nonnegative")
        if self.compare_seeds < 1 or self.restarts < 0 or self.max_iter < 1:
            raise ConfigError("compare_seeds and max_iter must be positive, restarts nonnegative")
        if not 0 < self.min_residual < 1:
            raise ConfigError("min_residual must lie in (0, 1)")
        if self.expect is not None:
            from .simulation import parse_expectation

            for e in self.expect:
                try:
                    parse_expectation(e)
                except ValueError as err:
                    raise ConfigError(str(err)) from None
        return self


_TYPES = {
    "int": (int,),
    "float": (int, float),
    "str": (str,),
    "bool": (bool,),
    "list": (list,),
}


def _check_type(name, value, annotation: str):
    if value is None:
        if "None" in annotation:
            return value
        raise ConfigError(f"{name} may not be null")
    base = annotation.split("|")[0].strip()
    ok = _TYPES[base]
    if isinstance(value, bool) and base in ("int", "float"):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if not isinstance(value, ok):
        raise ConfigError(f"{name} must be of type {base}, got {type(value).__name__}")
    if base == "float":
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{name} must be finite")
    return value


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _check_type(k, v, str(known[k].type)) for k, v in doc.items()}
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def state_to_dict(state: ModelState) -> dict:
    w = state.window
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kernel": kernel_to_dict(state.kernel),
        "noise": state.noise,
        "phi": state.phi,
        "window": {
            "capacity": w.capacity,
            "xi": w.xi.tolist(),
            "ubar": w.ubar.tolist(),
            "z": w.z.tolist(),
        },
        "inducing": {"xi": state.xi_o.tolist(), "ubar": state.ubar_o.tolist()},
        "target": {"mean": state.y_mean, "scale": state.y_scale},
    }


def state_from_dict(doc: dict) -> ModelState:
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ValueError("not a model snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    kernel = kernel_from_dict(doc["kernel"])
    w = doc["window"]
    width = kernel.control_dim + 1
    window = TrainingWindow(
        int(w["capacity"]),
        np.asarray(w["xi"], dtype=float).reshape(-1, kernel.input_dim),
        np.asarray(w["ubar"], dtype=float).reshape(-1, width),
        np.asarray(w["z"], dtype=float),
    )
    o = doc["inducing"]
    t = doc.get("target", {"mean": 0.0, "scale": 1.0})
    return ModelState(
        kernel,
        float(doc["noise"]),
        float(doc["phi"]),
        window,
        np.asarray(o["xi"], dtype=float).reshape(-1, kernel.input_dim),
        np.asarray(o["ubar"], dtype=float).reshape(-1, width),
        y_mean=float(t["mean"]),
        y_scale=float(t["scale"]),
    )


def save_snapshot(state: ModelState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_to_dict(state)))
    return path


def load_snapshot(path) -> ModelState:
    """Read a snapshot; the caches are rebuilt from the window and inducing set."""
    return state_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# traces and summaries
# ---------------------------------------------------------------------------


def trace_header(state_dim: int, control_dim: int, m: int) -> list[str]:
    return (
        ["t"]
        + [f"x{i}" for i in range(state_dim)]
        + [f"u_nom{i}" for i in range(control_dim)]
        + [f"u{i}" for i in range(control_dim)]
        + ["h"]
        + [f"psi{i}" for i in range(m)]
        + ["z", "pred_mean", "pred_var", "P_th", "M_size", "solver_status", "step_ms"]
    )


def _fmt(v) -> str:
    return repr(float(v))


def record_row(r: TraceRecord) -> list[str]:
    return (
        [_fmt(r.t)]
        + [_fmt(v) for v in r.x]
        + [_fmt(v) for v in r.u_nom]
        + [_fmt(v) for v in r.u]
        + [_fmt(r.h)]
        + [_fmt(v) for v in r.psi]
        + [_fmt(r.z), _fmt(r.pred_mean), _fmt(r.pred_var), _fmt(r.P_th), str(int(r.M_size)),
           r.solver_status, _fmt(r.step_ms)]
    )


class TraceWriter:
    """Appends one CSV row per control step, flushing as it goes."""

    def __init__(self, path, state_dim: int, control_dim: int, m: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(trace_header(state_dim, control_dim, m))
        self.rows = 0

    def __call__(self, record: TraceRecord):
        self._w.writerow(record_row(record))
        self._fh.flush()
        self.rows += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(trace: Trace, path, state_dim: int, control_dim: int, m: int) -> Path:
    with TraceWriter(path, state_dim, control_dim, m) as w:
        for r in trace.records:
            w(r)
    return Path(path)


def read_trace(path) -> dict:
    """Columns of a trace file as arrays (``solver_status`` stays a string array)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        vals = [row[j] for row in body]
        cols[name] = np.array(vals) if name == "solver_status" else np.array(vals, dtype=float)
    return cols


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(summary), indent=2))
    return path
