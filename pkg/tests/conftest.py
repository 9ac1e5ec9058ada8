import numpy as np
import pytest

from rramgen.cell import CellArray
from rramgen.features import IvShape
from rramgen.synthio import reference_params


def ohmic_iv(r_hi=10e3, r_lo=1e3, **kw):
    """Linear limiting curves ``V / r_hi`` and ``V / r_lo``."""
    hi = np.zeros(6)
    lo = np.zeros(7)
    hi[1] = 1.0 / r_hi
    lo[1] = 1.0 / r_lo
    return IvShape(hi, lo, **kw)


def fixed_cells(iv, r):
    """Replay cells frozen at mixing states ``r`` (thresholds never reached by reads)."""
    r = np.asarray(r, dtype=float).ravel()
    cyc = np.tile([1e5, -0.9, 5e3, 0.6], (len(r), 1))
    return CellArray.replay(iv, cyc, cyc, r0=r)


@pytest.fixture(scope="session")
def reference():
    return reference_params()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record_criterion(number, name, ok, detail):
    """Remember one acceptance verdict for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
