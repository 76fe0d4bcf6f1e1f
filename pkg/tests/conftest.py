import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the per-criterion PASS/FAIL lines after the test run.

    The acceptance tests print one line per criterion, but pytest captures
    stdout for passing tests; this hook re-emits the collected lines where
    they are always visible.
    """
    results = []
    for name, module in sys.modules.items():
        if name.endswith("test_acceptance"):
            results = getattr(module, "RESULTS", [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
