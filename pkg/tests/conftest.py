import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Records a one-line verdict for an acceptance criterion; the summary prints them in order."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.setdefault(number, []).append((passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[number]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  " + "; ".join(d for _, d in checks))
