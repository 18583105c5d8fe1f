"""Shared pytest wiring: echo the acceptance ledger after the run."""

ACCEPTANCE_LEDGER: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LEDGER:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LEDGER:
            terminalreporter.line(line)
