import logging
import warnings

import numpy as np
import pytest

from afvsgp.kernels import BaseKernel, CompositeKernel, augment
from afvsgp.sparse_gp import ModelState, TrainingWindow


def random_kernel(rng, control_dim=1, input_dim=2):
    return CompositeKernel(
        tuple(
            BaseKernel(rng.uniform(0.5, 2.0), tuple(rng.uniform(0.6, 2.0, input_dim)))
            for _ in range(control_dim + 1)
        )
    )


def random_data(rng, n, control_dim=1, input_dim=2, scale=1.5):
    xi = rng.uniform(-scale, scale, (n, input_dim))
    ubar = augment(rng.normal(0.0, 1.0, (n, control_dim)))
    z = np.sin(xi.sum(1)) + ubar[:, 1:].sum(1) * np.cos(xi[:, 0]) + 0.05 * rng.standard_normal(n)
    return xi, ubar, z


def random_state(rng, P=30, M=8, phi=0.98, control_dim=1, input_dim=2, noise=0.05, fill=None):
    """Window of ``fill`` (default ``P``) random samples; inducing = last ``M`` of them."""
    kernel = random_kernel(rng, control_dim, input_dim)
    n = P if fill is None else fill
    xi, ubar, z = random_data(rng, n, control_dim, input_dim)
    window = TrainingWindow(P, xi, ubar, z)
    return ModelState(kernel, noise, phi, window, xi[-M:], ubar[-M:])


def rel_fro(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet():
    logging.getLogger("afvsgp").setLevel(logging.ERROR)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# ---------------------------------------------------------------- acceptance report

_REPORT = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``record(number, title, ok, detail)`` logs one PASS/FAIL line and asserts ``ok``.

    A criterion test that errors before recording is reported as FAIL.
    """
    lines = request.config.stash.setdefault(_REPORT, {})
    seen = []

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}  {title}: {detail}"
        lines[number] = line
        seen.append(number)
        print(line)
        assert ok, line

    yield record
    if not seen:
        lines[request.node.name] = f"FAIL {request.node.name}: raised before reporting"


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
            terminalreporter.write_line(lines[key])
