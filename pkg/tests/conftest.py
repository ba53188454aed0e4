import time

import pytest

_REPORT: list[str] = []


class Report:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def check(self, criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        _REPORT.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def report() -> Report:
    return Report()


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_runs():
    """The desk experiment run twice with the same config and seed."""
    from cpae.experiment import DeskConfig, run_desk_experiment

    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        result = run_desk_experiment(DeskConfig())
        result.timings["total"] = time.perf_counter() - t0
        runs.append(result)
    return runs


@pytest.fixture(scope="session")
def desk(desk_runs):
    return desk_runs[0]
