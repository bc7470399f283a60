"""Shared pytest hooks: collects release-criteria lines emitted by the
acceptance tests and prints them after the run, outside stdout capture."""


def pytest_configure(config):
    config._criteria_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria_lines", [])
    if lines:
        terminalreporter.section("release criteria")
        for line in lines:
            terminalreporter.write_line(line)
