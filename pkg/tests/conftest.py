"""Shared pytest hooks for this suite."""

import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria result lines after the test table.

    Passing tests swallow their stdout under default capture; the
    acceptance checks also register their one-line verdicts in a module
    list so a plain ``pytest -v`` run still shows the full scoreboard.
    """
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            results = getattr(mod, "RESULTS", [])
            if results:
                terminalreporter.section("acceptance criteria")
                for line in results:
                    terminalreporter.write_line(line)
            break
