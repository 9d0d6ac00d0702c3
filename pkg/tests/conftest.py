import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=None):
    """Dense SPD matrix; with ``cond`` its eigenvalues span [1, cond]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if cond is None:
        lam = rng.uniform(0.5, 10.0, n)
    else:
        lam = np.geomspace(1.0, cond, n)
    return (Q * lam) @ Q.T


def diag_dominant(rng, n, density=0.5, symmetric=False):
    A = rng.uniform(-1, 1, (n, n)) * (rng.random((n, n)) < density)
    if symmetric:
        A = (A + A.T) / 2
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, np.abs(A).sum(axis=1) + rng.uniform(0.5, 2.0, n))
    return A


# acceptance results, printed once at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
