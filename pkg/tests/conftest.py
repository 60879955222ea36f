from hypothesis import settings

# numba compiles kernels on first use; wall-clock deadlines would flake on that
settings.register_profile("piwan", deadline=None)
settings.load_profile("piwan")

# criterion number -> (passed, detail), filled by test_acceptance.py
CRITERIA: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
