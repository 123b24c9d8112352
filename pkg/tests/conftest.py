import numpy as np
import pytest

from bayesinv.forward_model import DenseOperator, LinearGaussianModel

# criterion id -> (description, outcome); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def random_spd(rng, d, cond=10.0):
    """Random SPD matrix with eigenvalues spread over ``[1, cond]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.geomspace(1.0, cond, d) if d > 1 else np.array([1.0])
    return (Q * eig) @ Q.T


def random_model(rng, M, N=None, sigma_eps2=None, sigma_f2=None):
    N = M if N is None else N
    H = rng.standard_normal((M, N)) / np.sqrt(N)
    s_eps = rng.uniform(0.05, 0.5) if sigma_eps2 is None else sigma_eps2
    s_f = rng.uniform(0.5, 2.0) if sigma_f2 is None else sigma_f2
    model = LinearGaussianModel(DenseOperator(H), s_eps, s_f)
    f = rng.standard_normal(N) * np.sqrt(s_f)
    g = H @ f + np.sqrt(s_eps) * rng.standard_normal(M)
    return model, g


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        desc, ok = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {desc}")
