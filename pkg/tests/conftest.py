CRITERIA_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} ({detail})"
    CRITERIA_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
