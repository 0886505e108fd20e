import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records one acceptance line for the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (bool(ok), title, detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
