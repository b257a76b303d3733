"""Shared test plumbing: the acceptance verdict reporter.

Acceptance tests register one line per criterion through ``record_verdict``;
the collected lines are printed as a block after the run so the verdicts are
visible regardless of pytest's capture settings or individual test outcomes.
"""

_ACCEPTANCE_LINES: list[str] = []


def record_verdict(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
