import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def record(pytestconfig):
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    lines = pytestconfig.stash.setdefault(_LINES, [])

    def add(number: int, passed: bool, detail: str) -> bool:
        lines.append((number, f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"))
        print(lines[-1][1])
        return passed

    return add


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
