def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
