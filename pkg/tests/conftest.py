import numpy as np
import pytest

from nuhyp.cocycle import CocycleStats, orbit
from nuhyp.systems import cat_map, default_splitting, get_map

PERTURBED = "perturbed-cat:delta=0.1"
X0 = np.array([0.3, 0.7])

_criteria = {}


def record(number, ok, detail=""):
    _criteria[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def cat():
    f = cat_map()
    return f, default_splitting(f)


@pytest.fixture(scope="session")
def pert():
    f = get_map(PERTURBED)
    return f, default_splitting(f)


@pytest.fixture(scope="session")
def pert_short(pert):
    """2*10^4-step perturbed orbit with its cocycle data."""
    f, s = pert
    seg = orbit(f, X0, 20_000)
    return seg, CocycleStats(seg, s)


@pytest.fixture(scope="session")
def pert_long():
    """10^6-step perturbed orbit, full splitting."""
    f = get_map(PERTURBED)
    s = default_splitting(f, full=True)
    seg = orbit(f, X0, 1_000_000)
    return f, s, seg, CocycleStats(seg, s)
