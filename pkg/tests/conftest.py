import pytest

_CRITERIA = []


@pytest.fixture
def report():
    """Record one acceptance line; returns ``ok`` so callers can assert on it."""

    def _report(number, name, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(line)
