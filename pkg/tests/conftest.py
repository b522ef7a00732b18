import numpy as np
import pytest

from ectcontrol.connectome import ConnectomeMatrix, stabilize, threshold_binarize
from ectcontrol.synth import generate_connectome

_ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(number, ok, detail=""):
        _ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_symmetric(rng, n, stabilized=True):
    a = rng.normal(size=(n, n))
    a = a + a.T
    np.fill_diagonal(a, 0.0)
    if stabilized:
        a = a / (1.0 + np.max(np.abs(np.linalg.eigvalsh(a))))
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_connectome():
    raw = generate_connectome(20, 0.3, seed=7, subject_id="sub-x")
    return raw, stabilize(threshold_binarize(raw, 3))


@pytest.fixture
def path_graph():
    a = np.zeros((4, 4))
    for i in range(3):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return ConnectomeMatrix(a, binary=True)
