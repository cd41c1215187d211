import numpy as np
import pytest

from adcinv.fem import assemble
from adcinv.mesh import Variant, generate_phantom


@pytest.fixture(scope="session")
def phantom4():
    return generate_phantom(4, 40.0, Variant.THREE_DOMAIN)


@pytest.fixture(scope="session")
def system4(phantom4):
    return assemble(phantom4)


@pytest.fixture(scope="session")
def two8():
    return generate_phantom(8, 40.0, Variant.TWO_DOMAIN, cavity_cells=2)


@pytest.fixture(scope="session")
def two8_system(two8):
    return assemble(two8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
