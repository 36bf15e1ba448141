import pytest
import torch

from mvfuse import tensor_core as tc


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def f64():
    with tc.verification_mode():
        yield


# one PASS/FAIL line per acceptance criterion in the terminal summary

_CRITERIA: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = item.get_closest_marker("criterion")
    if crit is None or rep.when != "call" and not rep.failed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    key = crit.args[0]
    if rep.when == "call" or key not in _CRITERIA:
        _CRITERIA[key] = (status, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=int):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:>2}: {status}  {detail}")
