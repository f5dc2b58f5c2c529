import pytest

_CRITERIA = {}


class CriterionLog:
    def __init__(self, number, title):
        self.entries = _CRITERIA.setdefault(number, (title, []))[1]

    def check(self, ok, detail):
        self.entries.append((bool(ok), detail))
        assert ok, detail


@pytest.fixture
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, entries = _CRITERIA[number]
        verdict = "PASS" if entries and all(ok for ok, _ in entries) else "FAIL"
        details = "; ".join(d for _, d in entries)
        terminalreporter.write_line(f"[{verdict}] {number}. {title}: {details}")
