import pytest

from mergelock.checkpoint import ModelConfig
from mergelock.synth import synthetic_family

SMALL = ModelConfig(num_layers=2, num_heads=2, d_model=16, d_ff=32, activation="gelu")


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def family():
    return synthetic_family(11, SMALL, tasks=2)


acceptance_lines = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(acceptance_lines, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
