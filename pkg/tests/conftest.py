import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ------------------------------------------------------------
# Tests marked ``criterion`` get one PASS/FAIL line each in the terminal summary.
# The verdict is the test outcome; ``acceptance_note`` adds the measured values.

_VERDICTS = {}


@pytest.fixture
def acceptance_note(request):
    notes = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and rep.passed:
        return
    number, title, budget = mark.args
    prev = _VERDICTS.get(number)
    ok = rep.passed and (prev is None or prev[0])
    duration = rep.duration + (prev[3] if prev else 0.0)
    _VERDICTS[number] = (ok, title, budget, duration, getattr(item, "_acceptance_notes", []))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, title, budget, duration, notes = _VERDICTS[number]
        timing = f"{duration:.1f}s of {budget:g}s budget" + ("" if duration <= budget else ", over budget")
        tr.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title} ({timing})")
        for n in notes:
            tr.write_line(f"              {n}")
