import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance: criterion number -> (passed, detail); passed is None for a skip
ACCEPTANCE = {}
N_CRITERIA = 10


def _status(passed):
    return "SKIP" if passed is None else ("PASS" if passed else "FAIL")


@pytest.fixture
def record():
    def _record(number, passed, detail):
        ACCEPTANCE[number] = (None if passed is None else bool(passed), detail)
        print(f"criterion {number}: {_status(passed)} - {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, N_CRITERIA + 1):
        # a criterion that never recorded a result errored or was deselected
        passed, detail = ACCEPTANCE.get(number, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {number:>2}: {_status(passed)}  {detail}")
