import functools

import numpy as np
import pytest

from acdispatch import fixtures
from acdispatch.sqp import SolverOptions, solve_dispatch


@functools.lru_cache(maxsize=None)
def case(name):
    return fixtures.load(name)


@functools.lru_cache(maxsize=None)
def solved(name, workers=1):
    return solve_dispatch(case(name), SolverOptions(workers=workers))


@pytest.fixture
def rng():
    return np.random.default_rng(20241014)


def central_fd(fun, y, h=1e-6):
    """Columns of the central-difference Jacobian of ``fun`` at ``y``."""
    y = np.asarray(y, dtype=float)
    f0 = np.atleast_1d(fun(y))
    J = np.zeros((f0.size, y.size))
    for k in range(y.size):
        e = np.zeros_like(y)
        e[k] = h
        J[:, k] = (np.atleast_1d(fun(y + e)) - np.atleast_1d(fun(y - e))) / (2 * h)
    return J


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def interior_state(c, hour, rng, spread=0.1):
    """Random state near flat start with the case typing."""
    from acdispatch.acpf import flat_state

    s = flat_state(c, hour)
    lay = s.layout
    y = s.free_vector()
    y[: lay.ns.size] += rng.uniform(-spread, spread, lay.ns.size)
    y[lay.ns.size:] += rng.uniform(-spread, spread, lay.pq.size)
    return s.with_free(y)


# one summary line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
