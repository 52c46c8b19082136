"""Shared pytest hooks: the acceptance summary block."""

ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, passed, detail: str) -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
