import pytest
from hypothesis import HealthCheck, settings

from wifiacq.devicesim import build_fixture, default_policy, start_server

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

FIXED_TIME = 1_400_000_000


@pytest.fixture(scope="session")
def apollo_tree():
    return build_fixture(42, "apollo-2.2-rooted")


@pytest.fixture(scope="session")
def htc_tree():
    return build_fixture(42, "htc-4.1-nonrooted")


@pytest.fixture(scope="session")
def apollo_server(apollo_tree):
    with start_server(default_policy("apollo-2.2-rooted"), apollo_tree, bind_port=0) as handle:
        yield handle


@pytest.fixture(scope="session")
def htc_server(htc_tree):
    with start_server(default_policy("htc-4.1-nonrooted"), htc_tree, bind_port=0) as handle:
        yield handle


def fixed_clock(t=FIXED_TIME):
    return lambda: t


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number, title, passed, detail=""):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
