from pathlib import Path

import pytest

from aston.eventlog import ColumnMap, parse_csv

DATA = Path(__file__).parent / "data"

HOSPITAL_COLUMNS = ColumnMap(
    case="Case ID",
    activity="Activity",
    timestamp="Timestamp",
    resource="Resource",
    time_format="%d-%m-%Y %H:%M:%S",
)


@pytest.fixture
def hospital_log():
    return parse_csv(DATA / "hospital.csv", HOSPITAL_COLUMNS)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
