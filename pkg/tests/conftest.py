"""Shared pytest wiring for the test suite."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines in their own end-of-run section."""
    del exitstatus, config
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
