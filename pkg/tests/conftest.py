import pytest

from mfcsma import chain_spec, single_class_spec

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def single():
    return single_class_spec()


@pytest.fixture(scope="session")
def chain():
    return chain_spec()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
