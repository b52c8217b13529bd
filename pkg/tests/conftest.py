import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cfmec import config  # noqa: E402
from instances import Instance  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    warnings.filterwarnings("ignore", category=UserWarning, module="cvxpy")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_cfg():
    return config.from_presets("desk", omega_se=0.5)


@pytest.fixture(scope="session")
def instance(desk_cfg):
    return Instance(desk_cfg, 0, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
