"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line each."""

import pytest
import torch

# one thread keeps float reductions, and therefore trained checkpoints, reproducible
torch.set_num_threads(1)

_OUTCOMES: dict[str, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = marker.args[0]
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _OUTCOMES[name] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in _OUTCOMES.items():
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
