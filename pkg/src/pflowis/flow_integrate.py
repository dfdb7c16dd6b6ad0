"""Pseudo-time schedules and Euler-Maruyama migration of Gaussians and particles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConditioningError, FlowError
from .flow_core import (
    DiffusionConfig,
    HomotopyTerms,
    LinearizedModel,
    PriorGaussian,
    spd_cholesky,
    whitened_condition_number,
)

__all__ = [
    "FlowSchedule",
    "GaussianComponent",
    "ParticleSet",
    "FlowResult",
    "build_schedule",
    "migrate_component",
    "migrate_batch",
    "migrate_particles",
]


@dataclass(frozen=True)
class FlowSchedule:
    lambdas: np.ndarray
    deltas: np.ndarray
    beta: float
    delta1: float

    @property
    def n_steps(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class GaussianComponent:
    mu: np.ndarray
    P: np.ndarray
    log_w: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        if not np.isfinite(self.log_w):
            raise ValueError("log_w must be finite")


@dataclass(frozen=True)
class ParticleSet:
    states: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        lw = np.asarray(self.log_weights, dtype=float)
        if len(states) == 0 or lw.shape != (len(states),):
            raise ValueError("need a non-empty particle set with one log-weight per particle")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_weights", lw)


def build_schedule(delta1: float, beta: float, max_steps: int = 10_000_000) -> FlowSchedule:
    """Geometric pseudo-time grid: ``Delta_l = beta * Delta_{l-1}``, last step clamped to reach 1."""
    if not (0 < delta1 <= 1):
        raise ValueError(f"delta1 must lie in (0, 1], got {delta1}")
    if not beta >= 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    # smallest n with delta1 * (beta^n - 1) / (beta - 1) >= 1
    if beta == 1:
        n = math.ceil(1.0 / delta1 - 1e-9)
    else:
        n = math.ceil(math.log1p((beta - 1) / delta1) / math.log(beta) - 1e-9)
    n = max(n, 1)
    if n > max_steps:
        raise ValueError(f"schedule (delta1={delta1}, beta={beta}) needs {n} steps > max_steps")
    steps = delta1 * beta ** np.arange(n, dtype=float)
    lambdas = np.concatenate([[0.0], np.cumsum(steps)])
    # the geometric sum may land a hair below or above 1; the last step absorbs it
    lambdas[-1] = 1.0
    if n > 1 and lambdas[-2] >= 1.0:
        lambdas = np.concatenate([lambdas[:-2], [1.0]])
    deltas = np.diff(lambdas)
    if np.any(deltas <= 0):
        raise ValueError("schedule is not strictly increasing")
    return FlowSchedule(lambdas, deltas, float(beta), float(delta1))


@dataclass
class FlowResult:
    """Batched migration output. ``kappa`` has shape ``(n_steps, batch)`` when recorded."""

    mu: np.ndarray
    P: np.ndarray
    kappa: np.ndarray | None = None


Relinearizer = Callable[[np.ndarray], LinearizedModel]


def migrate_batch(mu0, P0, relinearize: Relinearizer, schedule: FlowSchedule,
                  diff: DiffusionConfig, record_kappa: bool = False) -> FlowResult:
    """Migrate a batch of Gaussians ``(mu0[k], P0[k])`` from pseudo-time 0 to 1.

    ``relinearize`` maps the current means ``(K, N)`` to a batched
    :class:`LinearizedModel`. The prior entering the flow formulas stays
    frozen at ``(mu0, P0)``.
    """
    mu = np.array(mu0, dtype=float, copy=True)
    P = np.array(P0, dtype=float, copy=True)
    prior = PriorGaussian(mu, P)
    try:
        P0inv, P0inv_mu0 = prior.precision()
    except ConditioningError as exc:
        raise FlowError(f"invalid prior covariance ({exc})", step=0) from exc
    eye = np.eye(mu.shape[-1])
    kappas = [] if record_kappa else None

    for l in range(1, schedule.n_steps + 1):
        lam = schedule.lambdas[l]
        dt = schedule.deltas[l - 1]
        try:
            model = relinearize(mu)
            G, r = model.information()
            terms = HomotopyTerms.build(np.full(mu.shape[:-1], lam), P0inv, P0inv_mu0, G, r)
            Q = terms.diffusion(diff)
            A, b = terms.drift(Q)
        except ConditioningError as exc:
            raise FlowError(str(exc), step=l) from exc
        if record_kappa:
            kappas.append(whitened_condition_number(A, terms.L))
        mu = mu + (np.einsum("...ij,...j->...i", A, mu) + b) * dt
        F = eye + dt * A
        P = F @ P @ np.swapaxes(F, -1, -2) + dt * Q
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(P))):
            bad = np.argwhere(~np.isfinite(mu).all(axis=-1) | ~np.isfinite(P).all(axis=(-2, -1)))
            raise FlowError("non-finite component state", step=l,
                            index=tuple(bad[0]) if len(bad) else None)

    kappa = np.asarray(kappas) if record_kappa else None
    return FlowResult(mu, P, kappa)


def _single(relinearize):
    def batched(mu):
        m = relinearize(mu[0])
        return LinearizedModel(m.H[None], m.R[None], m.z[None],
                               None if m.x_lin is None else np.asarray(m.x_lin)[None],
                               m.offset[None])
    return batched


def migrate_component(comp: GaussianComponent, relinearize: Relinearizer,
                      schedule: FlowSchedule, diff: DiffusionConfig) -> GaussianComponent:
    """Migrate one Gaussian component; ``relinearize`` maps a state ``(N,)`` to a model."""
    res = migrate_batch(comp.mu[None], comp.P[None], _single(relinearize), schedule, diff)
    return GaussianComponent(res.mu[0], res.P[0], comp.log_w)


def migrate_particles(particles: ParticleSet, relinearize: Relinearizer, schedule: FlowSchedule,
                      diff: DiffusionConfig, rng: np.random.Generator,
                      prior: PriorGaussian | None = None) -> ParticleSet:
    """Euler-Maruyama migration of individual particles.

    All particles share one linearization per step, taken at a reference mean
    that is carried along by the same drift (it starts at ``prior.mu0``). If
    ``prior`` is omitted, the particles' sample mean and covariance are used.
    Weights are left unchanged.
    """
    X = np.array(particles.states, dtype=float, copy=True)
    N = X.shape[1]
    if prior is None:
        if len(X) <= N:
            raise ValueError("need more particles than state dimensions to estimate a prior")
        prior = PriorGaussian(X.mean(axis=0), np.cov(X, rowvar=False))
    try:
        P0inv, P0inv_mu0 = prior.precision()
    except ConditioningError as exc:
        raise FlowError(f"invalid prior covariance ({exc})", step=0) from exc
    ref = np.array(prior.mu0, dtype=float, copy=True)

    for l in range(1, schedule.n_steps + 1):
        lam = schedule.lambdas[l]
        dt = schedule.deltas[l - 1]
        try:
            model = relinearize(ref)
            G, r = model.information()
            terms = HomotopyTerms.build(np.asarray(lam), P0inv, P0inv_mu0, G, r)
            Q = terms.diffusion(diff)
            A, b = terms.drift(Q)
            noisy = diff.family != "none" and np.any(Q != 0)
            L = spd_cholesky(Q, "diffusion Q") if noisy else None
        except ConditioningError as exc:
            raise FlowError(str(exc), step=l) from exc
        ref = ref + (A @ ref + b) * dt
        X = X + (X @ A.T + b) * dt
        if noisy:
            X = X + math.sqrt(dt) * rng.standard_normal(X.shape) @ L.T
    return ParticleSet(X, particles.log_weights.copy())
