import pytest

_RESULTS: dict = {}
N_CRITERIA = 12


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome; the terminal summary lists them all."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _RESULTS[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _RESULTS:
            ok, detail = _RESULTS[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: FAIL  (not run or errored before reporting)")
