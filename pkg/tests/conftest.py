import numpy as np
import pytest

from pflowis.validation import random_linear_instance


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_instance(seed, n=3, m=2):
    return random_linear_instance(np.random.default_rng(seed), n, m)


def conjugate_path(prior, model, lam):
    """Independent oracle: mean and covariance of the tempered posterior at pseudo-time ``lam``."""
    P0inv = np.linalg.inv(prior.P0)
    Rinv = np.linalg.inv(model.R)
    info = P0inv + lam * model.H.T @ Rinv @ model.H
    P = np.linalg.inv(info)
    mu = P @ (P0inv @ prior.mu0 + lam * model.H.T @ Rinv @ model.z_eff)
    return mu, P


ACCEPTANCE: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
