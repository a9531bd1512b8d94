import time

import pytest

_lines: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Report helper for acceptance tests: ``report(ok, detail)`` prints one line."""
    number, title = request.node.get_closest_marker("criterion").args
    start = time.perf_counter()
    done = []

    def report(ok: bool, detail: str) -> bool:
        elapsed = time.perf_counter() - start
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.1f} s]"
        _lines[number] = line
        print(line)
        done.append(ok)
        return ok

    yield report
    if not done:
        _lines[number] = f"criterion {number:>2} FAIL  {title}: did not complete"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_lines):
            terminalreporter.write_line(_lines[number])
