import pytest


def pytest_configure(config):
    config._verdicts = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the terminal summary and echo it."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._verdicts.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config._verdicts, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
