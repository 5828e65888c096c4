from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
_RESULTS = []


def pytest_addoption(parser):
    parser.addoption("--exchange-csv", default=str(REPO / "data" / "exchange_rate.csv"),
                     help="Exchange-rate benchmark CSV used by the acceptance suite")


@pytest.fixture(scope="session")
def exchange_csv(request):
    return Path(request.config.getoption("--exchange-csv"))


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` records and prints one acceptance line."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
