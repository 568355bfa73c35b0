import pytest


def pytest_configure(config):
    config.acceptance_lines = {}
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


@pytest.fixture(scope="session")
def record(request):
    """Store one PASS/FAIL line per acceptance criterion for the final summary."""
    lines = request.config.acceptance_lines

    def _record(key, passed, detail):
        lines[key] = f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}"
        print(lines[key])
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k)):
        terminalreporter.write_line(lines[key])
