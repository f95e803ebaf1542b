import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion and print it in the summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
