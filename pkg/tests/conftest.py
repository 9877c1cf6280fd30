import numpy as np
import pytest

from divem import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run the test once per kernel backend by swapping the dispatch table."""
    mod = kernels.available_backends()[request.param]
    for name in ("digamma", "trigamma", "hmm_forward_backward"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


# --- acceptance report ---------------------------------------------------------------

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): one line in the acceptance report")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE.append((marker.args[0], rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for label, outcome, secs in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {label}  ({secs:.1f} s)")
