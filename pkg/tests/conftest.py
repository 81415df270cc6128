import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE_RESULTS: dict = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f" :: {detail}"
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(
            f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")
        )


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(20240607)
