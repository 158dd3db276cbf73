import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from ngvi.data import synth
from ngvi.geometry import DomainBox, StandardParams, to_expectation
from ngvi.models import Dataset, LikelihoodModel

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_points(rng, n, d=1, U=3.0, D=5.0):
    """Points in a box with log-uniform variances, as expectation parameters."""
    mu = rng.uniform(-U, U, size=(n, d))
    s2 = np.exp(rng.uniform(-np.log(D), np.log(D), size=(n, d)))
    return [to_expectation(StandardParams(m, s)) for m, s in zip(mu, s2)]


means = st.floats(-5, 5, allow_nan=False)
variances = st.floats(1e-3, 50, allow_nan=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def poisson_point():
    return LikelihoodModel("poisson", synth("poisson_point"))


@pytest.fixture
def logistic_1d():
    return LikelihoodModel("logistic", Dataset([[1.0]], [1.0]))


@pytest.fixture
def logistic_2d():
    return LikelihoodModel("logistic", synth("logistic", n=30, d=2, seed=3))


@pytest.fixture
def box_4_25():
    return DomainBox(4.0, 25.0, 1)


# --- acceptance summary: one line per numbered criterion -----------------------------------

_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    entry = _CRITERIA.setdefault(n, {"passed": 0, "failed": 0, "skipped": 0, "title": marker.kwargs.get("title", "")})
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            entry["passed"] += 1
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            entry["skipped"] += 1
        else:
            entry["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        if e["failed"]:
            status = "FAIL"
        elif e["passed"] and e["skipped"]:
            status = f"PASS ({e['skipped']} part skipped)"
        elif e["passed"]:
            status = "PASS"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {e['title']}")
