import pytest

_CRITERIA: dict[int, tuple[bool | None, str]] = {}


class CriterionRecorder:
    def record(self, number: int, passed: bool | None, detail: str) -> None:
        """``passed=None`` marks a criterion that could not be evaluated here."""
        _CRITERIA[number] = (None if passed is None else bool(passed), detail)


@pytest.fixture(scope="session")
def criteria() -> CriterionRecorder:
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
