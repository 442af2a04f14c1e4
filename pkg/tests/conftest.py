import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from auditvotes import kernels
from auditvotes.graph import generate_sbm, make_inductive_split

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# desk-scale planted-partition fixture: assortative enough that feature-based
# edge scores can separate edges from non-edges
SBM = dict(classes=3, nodes_per_class=100, p_in=0.05, p_out=0.0005, feature_dim=60,
           feature_signal=0.8)


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm(**SBM, seed=0)


@pytest.fixture(scope="session")
def sbm_split(sbm):
    return make_inductive_split(sbm, 20, 0.2, seed=1)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# one PASS / FAIL line per acceptance criterion, printed in the terminal summary

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = mark.args
        status = "PASS" if rep.passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"{status}  criterion {number:>2}  {title}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
