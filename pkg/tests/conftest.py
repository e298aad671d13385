import warnings

import pytest

from kbsdef.bsdef import ContractionWarning

# (criterion number, passed, detail) lines collected by test_acceptance
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _quiet_contraction_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContractionWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
