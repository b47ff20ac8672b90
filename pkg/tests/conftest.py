import re

import numpy as np
import pytest

from microcontact import checks
from microcontact.mesh import generate_cell_ring, generate_cell_slit, generate_full_cell
from microcontact.microsolver import build_cell_context

_CRITERIA: dict[int, tuple[str, bool]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_")
_TITLES = {1: "local KKT suite", 2: "dual-primal oracle", 3: "homogenization oracle", 4: "tangent consistency",
           5: "stiffening monotonicity", 6: "uniaxial cross-method agreement", 7: "bending scenario",
           8: "invariance suite"}


@pytest.fixture(scope="session")
def D():
    return checks.material()


@pytest.fixture(scope="session")
def slit_ctx():
    return checks.slit_context()


@pytest.fixture(scope="session")
def ring_ctx():
    return checks.ring_context()


@pytest.fixture(scope="session")
def coarse_ctx():
    return checks.coarse_slit_context()


@pytest.fixture(scope="session")
def full_ctx(D):
    return build_cell_context(generate_full_cell(0.125), D)


@pytest.fixture(scope="session")
def slit_mesh():
    return generate_cell_slit(0.6, 0.02, 0.05)


@pytest.fixture(scope="session")
def ring_mesh():
    return generate_cell_ring(0.35, 0.30, 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m or "test_acceptance.py" not in report.nodeid:
        return
    k = int(m.group(1))
    name = _TITLES.get(k, f"criterion {k}")
    if report.when == "call" or report.failed:
        prev = _CRITERIA.get(k, (name, True))[1]
        _CRITERIA[k] = (name, prev and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        name, ok = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k} ({name}): {'PASS' if ok else 'FAIL'}")
