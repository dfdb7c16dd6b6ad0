"""Quick invariant suite behind the ``validate`` subcommand."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .estimator import MethodConfig, run_estimator, substream
from .flow_core import DiffusionConfig, HomotopyTerms, LinearizedModel, PriorGaussian, whitened_condition_number
from .flow_integrate import GaussianComponent, build_schedule, migrate_component
from .gmm_is import GaussianMixture, effective_sample_size, importance_weights, sample_mixture
from .harness import kalman_update, ospa
from .tdoa import ScenarioConfig, draw_sources, generate_measurements, tdoa_jacobian, tdoa_predict

__all__ = ["CheckResult", "random_linear_instance", "validate_invariants"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_linear_instance(rng: np.random.Generator, n: int, m: int):
    """Random prior and linear-Gaussian measurement model with unit-scale, well-conditioned covariances."""
    A = rng.standard_normal((n, n))
    P0 = A @ A.T / n + 0.5 * np.eye(n)
    B = rng.standard_normal((m, m))
    R = B @ B.T / m + 0.5 * np.eye(m)
    H = rng.standard_normal((m, n))
    mu0 = rng.standard_normal(n)
    z = H @ mu0 + rng.multivariate_normal(np.zeros(m), H @ P0 @ H.T + R)
    return PriorGaussian(mu0, P0), LinearizedModel(H, R, z)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _check_kalman(rng) -> CheckResult:
    sched = build_schedule(1e-6, 1.2)
    worst = 0.0
    for _ in range(10):
        prior, model = random_linear_instance(rng, int(rng.integers(1, 7)), int(rng.integers(1, 5)))
        mu, P = kalman_update(prior.mu0, prior.P0, model.H, model.R, model.z)
        out = migrate_component(GaussianComponent(prior.mu0, prior.P0), lambda x: model, sched,
                                DiffusionConfig("gromov"))
        worst = max(worst, _rel(out.mu, mu), _rel(out.P, P))
    return CheckResult("gromov flow matches the Kalman posterior", bool(worst < 1e-6), f"max rel err {worst:.2e}")


def _check_optimal_scale(rng) -> CheckResult:
    bad = 0
    for _ in range(20):
        prior, model = random_linear_instance(rng, int(rng.integers(2, 5)), int(rng.integers(1, 4)))
        t = HomotopyTerms.from_models(float(rng.uniform(0, 1)), prior, model)
        alpha = float(rng.choice([0.01, 0.1, 0.5]))
        c_star = float(t.optimal_scale(alpha))
        grid = np.arange(0.0, 2 * c_star + 1.0, 1e-3)
        A = t.deterministic_jacobian()[None] - grid[:, None, None] * np.eye(len(prior.mu0))
        J = whitened_condition_number(A, np.broadcast_to(t.L, A.shape)) + alpha * grid
        if abs(grid[np.argmin(J)] - c_star) > 1e-3 + 1e-9:
            bad += 1
    return CheckResult("closed-form diffusion scale equals grid argmin", bad == 0, f"{bad}/20 mismatches")


def _check_ospa(rng) -> CheckResult:
    worst = 0.0
    for m, n in itertools.product(range(4), range(4)):
        X = rng.uniform(-20, 20, (m, 2))
        Y = rng.uniform(-20, 20, (n, 2))
        k = max(m, n)
        if k == 0:
            continue
        best = np.inf
        small, big = (X, Y) if m <= n else (Y, X)
        for perm in itertools.permutations(range(len(big)), len(small)):
            d = [min(np.linalg.norm(small[i] - big[j]), 30.0) ** 2 for i, j in enumerate(perm)]
            best = min(best, sum(d) + 900.0 * (k - len(small)))
        ref = np.sqrt(best / k)
        worst = max(worst, abs(ospa(X, Y) - ref), abs(ospa(Y, X) - ref))
    return CheckResult("OSPA equals brute force and is symmetric", bool(worst < 1e-12), f"max abs diff {worst:.1e}")


def _check_jacobian(rng) -> CheckResult:
    geo = ScenarioConfig().geometry()
    X = rng.uniform(-900, 900, (200, 3))
    worst = 0.0
    h = 1e-3
    for s in range(geo.n_sensors):
        J = tdoa_jacobian(X, s, geo)[:, 0, :]
        fd = np.stack([(tdoa_predict(X + h * e, s, geo) - tdoa_predict(X - h * e, s, geo)) / (2 * h)
                       for e in np.eye(3)], axis=1)
        worst = max(worst, float(np.max(np.linalg.norm(J - fd, axis=1) / np.linalg.norm(J, axis=1))))
    return CheckResult("TDOA Jacobian matches finite differences", bool(worst < 1e-6), f"max rel err {worst:.1e}")


def _check_is_identity(rng) -> CheckResult:
    prior, model = random_linear_instance(rng, 3, 2)
    mu, P = kalman_update(prior.mu0, prior.P0, model.H, model.R, model.z)
    post = GaussianMixture(mu[None], P[None], [0.0])
    Lr = np.linalg.cholesky(model.R)

    def loglik(X):
        y = np.linalg.solve(Lr, (model.z[None] - X @ model.H.T).T)
        return -0.5 * np.sum(y * y, axis=0)

    samples = sample_mixture(post, 2000, rng)
    w = importance_weights(samples, GaussianMixture(prior.mu0[None], prior.P0[None], [0.0]), loglik, post)
    dev = float(np.max(np.abs(w.weights * len(w.weights) - 1)))
    return CheckResult("proposal equal to the posterior gives uniform weights", bool(dev < 1e-10),
                       f"max |N w - 1| = {dev:.1e}, ESS {effective_sample_size(w):.0f}")


def _check_determinism() -> CheckResult:
    sc = ScenarioConfig(n_sources=1, p_d=1.0, mu_c=0.0)
    geo = sc.geometry()
    method = MethodConfig("PFL-OS", 1e-4, 2.0, 0.1, n_g=8, n_p=50)
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(substream(7, "data"))
        meas = generate_measurements(sc, geo, rng, draw_sources(sc, rng))
        st = run_estimator(sc, geo, meas, method, substream(7, "estimator", method.name))
        outs.append(np.concatenate([st.mixture.means.ravel(), st.mixture.covs.ravel(), st.mixture.log_weights]))
    same = outs[0].shape == outs[1].shape and outs[0].tobytes() == outs[1].tobytes()
    return CheckResult("same seed gives bit-identical posteriors", same, "identical" if same else "differs")


def validate_invariants(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [_check_kalman, _check_optimal_scale, _check_ospa, _check_jacobian, _check_is_identity]
    results = [c(rng) for c in checks]
    results.append(_check_determinism())
    return results
