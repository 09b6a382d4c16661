import pytest

_LINES = {}


@pytest.fixture
def record():
    """record(criterion, ok, detail): one summary line per acceptance criterion."""

    def _record(criterion, ok, detail):
        _LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[criterion])

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_LINES):
            terminalreporter.write_line(_LINES[key])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long end-to-end acceptance experiments")
