def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in sorted(RESULTS.items()):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
