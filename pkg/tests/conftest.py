import numpy as np
import pytest

from polydec.systems import ControlSystem, load_benchmark


@pytest.fixture
def cartpole():
    return load_benchmark("cartpole")


@pytest.fixture
def manip2():
    return load_benchmark("manip2")


@pytest.fixture
def biped():
    return load_benchmark("biped3")


def linear_system(A, B, Q, R, lam=1e-3, lower=None, upper=None, box=1.0, grid=11, name="linear"):
    """Small ControlSystem with linear dynamics xdot = A x + B u and the goal at the origin."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    lower = np.full(m, -np.inf) if lower is None else lower
    upper = np.full(m, np.inf) if upper is None else upper
    return ControlSystem(
        name=name, n=n, m=m, dynamics_name="linear",
        dynamics_params=dict(A=A.tolist(), B=B.tolist()),
        input_lower=lower, input_upper=upper,
        goal_state=np.zeros(n), goal_input=np.zeros(m),
        Q=np.atleast_2d(Q), R=np.atleast_2d(R), lam=lam,
        S_full=[[-box, box]] * n, S_eval=[[-box / 2, box / 2]] * n,
        grid_shape=(grid,) * n,
        state_groups=[(f"s{i}", (i,)) for i in range(n)],
        input_groups=[(f"u{j}", (j,)) for j in range(m)],
    )


_CRITERIA: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        bad = [name for name, outcome in results if outcome != "passed"]
        verdict = "FAIL" if bad else "PASS"
        line = f"criterion {n}: {verdict} ({len(results) - len(bad)}/{len(results)} checks)"
        if bad:
            line += " failing: " + ", ".join(bad)
        terminalreporter.write_line(line)
