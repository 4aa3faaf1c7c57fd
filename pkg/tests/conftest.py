import sys

import numpy as np
import pytest

from dualmixed.geometry import ManifoldModel, build_grid


@pytest.fixture(scope="session")
def t2():
    return ManifoldModel.torus(2, (1.0, 1.0))


@pytest.fixture(scope="session")
def rp2():
    return ManifoldModel.rp2()


@pytest.fixture(scope="session")
def s2():
    return ManifoldModel.sphere()


@pytest.fixture(scope="session")
def t2_grid(t2):
    return build_grid(t2, base=16, fiber=64)


@pytest.fixture(scope="session")
def rp2_grid(rp2):
    return build_grid(rp2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one of the twelve acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.LINES):
        terminalreporter.write_line(line)
