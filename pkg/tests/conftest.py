from __future__ import annotations

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class Criterion:
    """Records one acceptance verdict, prints it, and fails the test if it did not hold."""

    def __init__(self, name: str) -> None:
        self.name = name

    def check(self, ok: bool, detail: str) -> None:
        ok = bool(ok)
        _RESULTS.append((self.name, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'}  {self.name}: {detail}")
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return Criterion(marker.args[0] if marker else request.node.name)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
