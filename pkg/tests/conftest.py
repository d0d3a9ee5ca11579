import numpy as np
import pytest

from mixpost.core import GammaNormalParams
from mixpost.simstudy import simulate_gamma_normal


def random_params(rng, E):
    return GammaNormalParams(rng.uniform(2, 5), rng.uniform(1, 5), rng.uniform(0.2, 2),
                             rng.normal(0, 1, E + 1), rng.uniform(0.5, 1.5, E),
                             rng.uniform(0.5, 1.5, E))


def random_dataset(rng, n=200, max_members=20):
    """Gaussian-model data with 1-3 sources of 1..max_members members."""
    E = int(rng.integers(1, 4))
    K = [int(k) for k in rng.integers(1, max_members + 1, size=E)]
    params = random_params(rng, E)
    return simulate_gamma_normal(params, K, n, rng), params


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
