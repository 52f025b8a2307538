import numpy as np
import pytest

from benign_leaky.mixture import Dataset, MixtureSpec, generate


def make_data(Z, y, mu):
    """Dataset with prescribed noise rows, labels and mean."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    spec = MixtureSpec(p=Z.shape[1], n=Z.shape[0], mu=mu)
    return Dataset.from_components(y, Z, spec)


def random_data(n, p, mu_norm_sq=0.0, seed=0, **kw):
    mu = np.zeros(p)
    mu[0] = np.sqrt(mu_norm_sq)
    return generate(MixtureSpec(p=p, n=n, mu=mu, seed=seed, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(k, passed, detail):
    line = f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
