import sys
import numpy as np
import pytest

from bsee_control.lattice import BrownianLattice, TimeGrid
from bsee_control.lq import lq_problem


@pytest.fixture
def tree4():
    return BrownianLattice(TimeGrid(1.0, 4))


@pytest.fixture
def unit_lq_det():
    """Closed-form scalar problem on N=256 (deterministic chain)."""
    return lq_problem(steps=256, coercivity_lambda=1.0)


@pytest.fixture
def unit_lq_tree():
    return lq_problem(steps=8, mode="tree", xi=_linear_xi(1.0, 1.0), coercivity_lambda=1.0)


def _linear_xi(a, b):
    from bsee_control.gelfand import Field
    return Field.of_path(lambda t, W: (a + b * np.asarray(W))[:, None], (1,))


@pytest.fixture
def linear_xi():
    return _linear_xi


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        title, ok, detail = results[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
