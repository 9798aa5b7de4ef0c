import pytest

# criterion number -> list of (part, passed, detail)
_CRITERIA: dict[int, list] = {}


@pytest.fixture
def report():
    """Record one checked part of an acceptance criterion."""

    def _report(criterion: int, part: str, passed: bool, detail: str) -> bool:
        _CRITERIA.setdefault(criterion, []).append((part, bool(passed), detail))
        print(f"criterion {criterion} / {part}: {'PASS' if passed else 'FAIL'} ({detail})")
        return bool(passed)

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_CRITERIA):
        parts = _CRITERIA[c]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        details = "; ".join(f"{p}={'ok' if ok else 'FAIL'} [{d}]" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {c:2d}: {verdict}  {details}")
