import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance gate's verdict lines after capture ends."""
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None) if mod else None
    if not verdicts:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for line in verdicts:
        terminalreporter.write_line(line)
