import math

import numpy as np
import pytest

from diffquant import ControlModel, Grid, build_action_grid
from diffquant.pde import solve_hjb_discounted

# scalar discounted LQ: dX = (-X + u) dt + sqrt(2) dW, c = x^2 + u^2, alpha = 1
LQ_P = (math.sqrt(13.0) - 3.0) / 2.0
LQ_M = 2.0 * LQ_P
LQ_KAPPA = -LQ_P


def lq_model(**kw):
    return ControlModel.build(1, ([-4.0], [4.0]), ["-x1 + u1"], [["sqrt(2)"]], "x1^2 + u1^2",
                              alpha=1.0, name="lq", **kw)


def ou_model(cost="x1^2"):
    return ControlModel.build(1, ([-1.0], [1.0]), ["-x1"], [["sqrt(2)"]], cost, name="ou")


@pytest.fixture(scope="session")
def lq():
    return lq_model()


@pytest.fixture(scope="session")
def lq_grid():
    return Grid.uniform([-6.0], [6.0], h=0.01)


@pytest.fixture(scope="session")
def lq_hjb(lq, lq_grid):
    """HJB solution on the 3 * 2^8 lattice (shared by several modules)."""
    return solve_hjb_discounted(lq, build_action_grid(lq.action, 768), lq_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
