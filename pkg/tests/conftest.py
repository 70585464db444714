ACCEPTANCE_LINES = []


def record_acceptance(number, name, passed, detail):
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"acceptance {number:>2} [{status}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
