import numpy as np
import pytest
from scipy.optimize import linprog

from mffbsde.coefficients import CoefficientBundle, PopulationSystem


def lp_wasserstein1(xa, wa, xb, wb):
    """Brute-force optimal transport on the line by linear programming."""
    xa, xb = np.asarray(xa, float), np.asarray(xb, float)
    wa = np.asarray(wa, float) / np.sum(wa)
    wb = np.asarray(wb, float) / np.sum(wb)
    na, nb = xa.size, xb.size
    cost = np.abs(xa[:, None] - xb[None, :]).ravel()
    A_eq, b_eq = [], []
    for i in range(na):
        row = np.zeros((na, nb))
        row[i, :] = 1
        A_eq.append(row.ravel())
        b_eq.append(wa[i])
    for j in range(nb):
        row = np.zeros((na, nb))
        row[:, j] = 1
        A_eq.append(row.ravel())
        b_eq.append(wb[j])
    res = linprog(cost, A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def zero_bundle(m=1, sigma=1.0, **kw):
    base = dict(
        h=lambda t, x: np.zeros_like(x),
        b=lambda t, x, y, z, mm: np.zeros_like(np.atleast_2d(x)),
        sigma=lambda t, x: sigma * np.eye(m),
        f=lambda t, x, y, z, mm: np.zeros((np.atleast_2d(x).shape[0], 1)),
        g=lambda x, mm: np.zeros((np.atleast_2d(x).shape[0], 1)),
    )
    base.update(kw)
    return CoefficientBundle(**base)


def single(bundle, x0=0.0):
    return PopulationSystem([bundle], [np.atleast_1d(np.asarray(x0, float))])


@pytest.fixture
def lp_w1():
    return lp_wasserstein1


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
