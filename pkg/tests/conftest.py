import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it.

    ``ok=None`` marks a criterion that is documented but not executed.
    """

    def record(number, title, ok, detail=""):
        lines = request.config.stash.setdefault(_VERDICTS, {})
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        lines[number] = f"criterion {number:>2} {status:<7} {title}" + (f"  [{detail}]" if detail else "")
        assert ok is None or ok, lines[number]

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
