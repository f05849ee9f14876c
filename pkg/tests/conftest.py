import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number): acceptance criterion checked by the test")


@pytest.fixture
def verdict(request):
    """Record the PASS/FAIL line of an acceptance criterion; printed again in the run summary."""
    store = request.config.stash.setdefault(VERDICTS, {})
    number = request.node.get_closest_marker("criterion").args[0]
    store[number] = f"criterion {number:2d}: FAIL  (errored before recording a verdict)"

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
