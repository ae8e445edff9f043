import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from staggered_ife.panel import NEVER  # noqa: E402
from staggered_ife.simulate import SimConfig, generate_panel  # noqa: E402

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(tag, text): acceptance criterion check")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        tag = getattr(report, "acceptance_tag", None)
        if tag is None:
            return
        ok = report.outcome == "passed"
        prev = _ACCEPTANCE.get(tag, (True, ""))
        _ACCEPTANCE[tag] = (prev[0] and ok, report.acceptance_text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance_tag = m.args[0]
        rep.acceptance_text = m.args[1] if len(m.args) > 1 else ""


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(_ACCEPTANCE, key=lambda s: int(s[2:])):
        ok, text = _ACCEPTANCE[tag]
        terminalreporter.write_line(f"{tag} {'PASS' if ok else 'FAIL'}: {text}")


@pytest.fixture
def sim_panel():
    data, _ = generate_panel(SimConfig(n=400, truth_ife=1, seed=11))
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def never():
    return NEVER
