import sys


def pytest_terminal_summary(terminalreporter):
    lines = []
    for module in list(sys.modules.values()):
        lines.extend(getattr(module, "ACCEPTANCE_RESULTS", ()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
