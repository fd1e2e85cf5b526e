import sys

import numpy as np
import pytest

from gpcrhc.basis import BasisSet, Distribution
from gpcrhc.galerkin import ChaosState, UncertainSystem, lift_system
from gpcrhc.transcription import EXPECTATION_STATE, ConstraintSpec, CostSpec

A_PAPER = np.array([[1.02, -0.1], [0.1, 0.98]])
B_PAPER = np.array([[0.1], [0.05]])
X0_PAPER = np.array([-0.5, 1.0])


def paper_system() -> UncertainSystem:
    return UncertainSystem(
        (((0,), A_PAPER), ((1,), 0.04 * np.eye(2))),
        (((0,), B_PAPER),),
        (Distribution("uniform"),),
    )


def paper_chaos(r: int = 4):
    sysu = paper_system()
    return lift_system(sysu, BasisSet(sysu.distributions, r))


def paper_cost(N: int = 10) -> CostSpec:
    return CostSpec(np.diag([2.0, 5.0]), np.eye(1), N)


def paper_constraint() -> ConstraintSpec:
    return ConstraintSpec(EXPECTATION_STATE, -1.0, G=[1.0, 0.0], direction=">=")


def paper_x0(size: int) -> ChaosState:
    return ChaosState.deterministic(X0_PAPER, size)


@pytest.fixture(scope="session")
def chaos4():
    return paper_chaos(4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
