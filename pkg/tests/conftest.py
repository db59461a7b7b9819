import sys

# lines appended by test_acceptance.py, one per criterion
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    lines = getattr(acc, "RESULTS", None) or ACCEPTANCE
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
