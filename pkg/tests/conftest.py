import pytest

from hierdyson.coupling import CouplingSequence
from hierdyson.rg_flow import Numerics


@pytest.fixture
def ref_coupling():
    return CouplingSequence(form="polylog", a=0.01, lam=1.5)


@pytest.fixture
def cheap():
    return Numerics(quad_u=32, quad_rho=32, pts_per_scale=8)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
