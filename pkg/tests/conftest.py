import pytest


@pytest.fixture
def report(request):
    """Record one summary line per acceptance criterion; printed after the run."""
    lines = request.config.stash.setdefault(_KEY, [])

    def add(criterion: int, passed: bool, detail: str) -> None:
        lines.append((criterion, f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"))

    return add


_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(line)
