from __future__ import annotations

import time

import pytest

from jini.harness import preset, run_experiment

_OUTCOMES: dict[int, str] = {}
_DETAILS: dict[int, str] = {}


def record(n: int, detail: str) -> None:
    """Attach a one-line detail to the report of criterion ``n``."""
    _DETAILS[n] = detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or rep.failed:
        # a criterion split over several tests passes only if every part passes
        ok = rep.passed and _OUTCOMES.get(n, "PASS") == "PASS"
        _OUTCOMES[n] = "PASS" if ok else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        line = f"criterion {n:2d}: {_OUTCOMES[n]}"
        if n in _DETAILS:
            line += f"  ({_DETAILS[n]})"
        terminalreporter.write_line(line)


STUDIES = {
    "negbin": lambda: preset("negbin-t2"),
    "censored-poisson": lambda: preset("censored-poisson-t8"),
    "misclassified": lambda: preset("logistic-misclass-t4-I", n=600, p=20),
    "variance": lambda: preset("poisson-intercept"),
}


class StudyCache:
    """Desk-scale studies run once per session with a single worker."""

    def __init__(self):
        self.results = {}
        self.seconds = {}

    def __call__(self, name):
        if name not in self.results:
            t0 = time.perf_counter()
            self.results[name] = run_experiment(STUDIES[name](), workers=1)
            self.seconds[name] = time.perf_counter() - t0
        return self.results[name]


@pytest.fixture(scope="session")
def study():
    return StudyCache()
