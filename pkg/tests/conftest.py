"""Collects acceptance-criterion outcomes and prints one line per criterion."""

CRITERION_RESULTS: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, status: str, detail: str = "") -> None:
    CRITERION_RESULTS[number] = (status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERION_RESULTS):
        status, detail = CRITERION_RESULTS[number]
        line = f"criterion {number:2d}: {status}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
