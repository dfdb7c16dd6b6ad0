"""Sequential-across-sensors posterior updating with flow-induced importance sampling."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeightsError, FlowError
from .flow_core import DiffusionConfig
from .flow_integrate import FlowSchedule, build_schedule
from .gmm_is import (
    GaussianMixture,
    build_proposal,
    effective_sample_size,
    evaluate_log_gmm,
    importance_weights,
    reduce_mixture,
    sample_mixture,
)
from .tdoa import ScenarioConfig, SensorGeometry, tdoa_predict, tdoa_relinearizer

__all__ = [
    "METHODS",
    "MethodConfig",
    "SensorDiagnostics",
    "PosteriorState",
    "initial_state",
    "clutter_aware_loglik",
    "sensor_update",
    "estimate_sources",
    "run_estimator",
    "substream",
]

METHODS = ("BS", "PFL-D", "PFL-S", "PFL-OS")
_FAMILY = {"PFL-D": "none", "PFL-S": "gromov", "PFL-OS": "optimized"}

# pairs more than this many nats below the best pair of their prior
# component are left out of the proposal
PRUNE_LOG_RATIO = 25.0
@dataclass(frozen=True)
class MethodConfig:
    method: str
    delta1: float | None = None
    beta: float | None = None
    alpha: float | None = None
    n_g: int = 100
    n_p: int = 5000
    label: str | None = None
    curvature: bool = True  # add the second-order model error 0.5 tr((Hxx P)^2) to R when relinearizing

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method != "BS":
            if self.delta1 is None or self.beta is None:
                raise ValueError(f"{self.method} requires delta1 and beta")
            build_schedule(self.delta1, self.beta)
        if self.method == "PFL-OS" and (self.alpha is None or not self.alpha > 0):
            raise ValueError("PFL-OS requires alpha > 0")
        if self.method != "PFL-OS" and self.alpha is not None:
            raise ValueError(f"alpha only applies to PFL-OS, not {self.method}")
        if self.n_g < 1 or self.n_p < 1:
            raise ValueError("n_g and n_p must be >= 1")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.method == "BS":
            return "BS"
        tag = f"{self.method}({self.beta:g},{self.delta1:g})"
        return tag if self.alpha is None else f"{tag}[a={self.alpha:g}]"

    @property
    def schedule(self) -> FlowSchedule | None:
        return None if self.method == "BS" else build_schedule(self.delta1, self.beta)

    @property
    def diffusion(self) -> DiffusionConfig | None:
        if self.method == "BS":
            return None
        return DiffusionConfig(_FAMILY[self.method], self.alpha)


@dataclass
class SensorDiagnostics:
    sensor: int
    n_measurements: int
    ess: float
    n_samples: int
    n_lambda: int
    kappa: np.ndarray | None = None
    fallback: bool = False
    note: str = ""


@dataclass
class PosteriorState:
    mixture: GaussianMixture
    diagnostics: list = field(default_factory=list)


def substream(master_seed: int, *keys) -> np.random.SeedSequence:
    """Counter-based child stream: ``SeedSequence(master_seed, spawn_key=keys)``.

    String keys are mapped to their CRC-32 so method labels give stable streams.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.SeedSequence(master_seed, spawn_key=spawn)


def initial_state(scenario: ScenarioConfig, n_g: int, rng: np.random.Generator) -> PosteriorState:
    """``n_g`` equal-weight components, means uniform over the ROI, std ``half_width / 2`` per axis."""
    h = scenario.roi_half_width
    means = rng.uniform(-h, h, size=(n_g, 3))
    covs = np.broadcast_to(np.eye(3) * (h / 2) ** 2, (n_g, 3, 3)).copy()
    return PosteriorState(GaussianMixture(means, covs, np.full(n_g, -np.log(n_g))))


def _clutter_terms(scenario: ScenarioConfig, geometry: SensorGeometry, sensor: int):
    """Log of ``(1 - p_d) * clutter density`` (or ``None``) and of ``p_d``."""
    density = scenario.mu_c / (2 * geometry.max_tdoa(sensor))
    missed = (1 - scenario.p_d) * density
    return (np.log(missed) if missed > 0 else None), np.log(scenario.p_d)


def clutter_aware_loglik(z, sensor: int, geometry: SensorGeometry, scenario: ScenarioConfig):
    """PDA-style per-sensor log-likelihood of states ``(S, 3)``.

    ``l(x) = (1 - p_d) * lambda_c + p_d * sum_m N(z_m; h(x), sigma_v^2)``, with
    ``lambda_c = mu_c / (2 d / c)`` the clutter density; this is the usual
    form multiplied through by ``lambda_c``, which keeps ``mu_c = 0`` finite.
    """
    z = np.asarray(z, dtype=float)
    log_missed, log_pd = _clutter_terms(scenario, geometry, sensor)
    sig = scenario.sigma_v

    def loglik(X):
        h = tdoa_predict(X, sensor, geometry)
        r = (z[None, :] - np.atleast_1d(h)[:, None]) / sig
        terms = log_pd - 0.5 * r * r - np.log(sig) - 0.5 * np.log(2 * np.pi)
        if log_missed is not None:
            terms = np.concatenate([terms, np.full((len(terms), 1), log_missed)], axis=1)
        if terms.shape[1] == 0:
            return np.full(len(terms), -np.inf)
        return logsumexp(terms, axis=1)

    return loglik


def sensor_update(state: PosteriorState, sensor: int, z, geometry: SensorGeometry,
                  scenario: ScenarioConfig, method: MethodConfig, seed: np.random.SeedSequence,
                  record_kappa: bool = True) -> PosteriorState:
    """One sensor's update: proposal, sampling, weighting, reduction to ``n_g`` components."""
    # measurements are unlabeled; a canonical order makes the update (and its
    # random streams) independent of how they were listed
    z = np.sort(np.asarray(z, dtype=float).ravel())
    prior = state.mixture.normalized()
    log_missed, log_pd = _clutter_terms(scenario, geometry, sensor)

    if len(z) == 0:
        # nothing detected: the likelihood is constant in x
        diag = SensorDiagnostics(sensor, 0, float("nan"), 0, 0, note="no measurements")
        return PosteriorState(prior, state.diagnostics + [diag])

    if method.method == "BS":
        proposal_mix = prior
        kappa = None
        n_lambda = 0
    else:
        def factory(zm, s, covs):
            return tdoa_relinearizer(zm, s, geometry, scenario.sigma_v, covs if method.curvature else None)

        try:
            prop = build_proposal(prior, [(zm, sensor) for zm in z], factory, method.schedule,
                                  method.diffusion, missed_log_factor=log_missed,
                                  detection_log_factor=log_pd, prune_log_ratio=PRUNE_LOG_RATIO,
                                  record_kappa=record_kappa)
        except FlowError as exc:
            diag = SensorDiagnostics(sensor, len(z), float("nan"), 0, method.schedule.n_steps,
                                     fallback=True, note=f"flow error: {exc}")
            return PosteriorState(prior, state.diagnostics + [diag])
        proposal_mix = prop.mixture
        kappa = prop.kappa
        n_lambda = prop.n_steps

    children = seed.spawn(len(proposal_mix))
    rngs = [np.random.default_rng(c) for c in children]
    samples = sample_mixture(proposal_mix, method.n_p, rngs)
    loglik = clutter_aware_loglik(z, sensor, geometry, scenario)
    try:
        weighted = importance_weights(samples, prior, loglik, proposal_mix.equal_weights())
    except DegenerateWeightsError as exc:
        diag = SensorDiagnostics(sensor, len(z), 0.0, len(samples.states), n_lambda,
                                 _kappa_summary(kappa), fallback=True, note=str(exc))
        return PosteriorState(prior, state.diagnostics + [diag])

    posterior = reduce_mixture(weighted, method.n_g, proposal=proposal_mix)
    diag = SensorDiagnostics(sensor, len(z), effective_sample_size(weighted), len(samples.states),
                             n_lambda, _kappa_summary(kappa))
    return PosteriorState(posterior, state.diagnostics + [diag])


def _kappa_summary(kappa):
    """Median over migrated components of the per-step stiffness, shape ``(n_steps,)``."""
    if kappa is None or kappa.size == 0:
        return None
    return np.median(kappa, axis=1)


def estimate_sources(state: PosteriorState, k: int, min_separation: float = 50.0):
    """Means of the ``k`` heaviest components that are ``min_separation`` apart.

    Returns ``(positions, complete)``; ``complete`` is False when fewer than
    ``k`` well-separated components exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mix = state.mixture
    order = np.argsort(-mix.log_weights, kind="stable")
    chosen = []
    for i in order:
        mu = mix.means[i]
        if all(np.linalg.norm(mu - mix.means[j]) >= min_separation for j in chosen):
            chosen.append(i)
        if len(chosen) == k:
            break
    positions = mix.means[chosen] if chosen else np.empty((0, mix.dim))
    return positions, len(chosen) == k


def run_estimator(scenario: ScenarioConfig, geometry: SensorGeometry, measurements, method: MethodConfig,
                  seed: np.random.SeedSequence, record_kappa: bool = True) -> PosteriorState:
    """Initialize the mixture and process all sensors in order."""
    init_seed, *sensor_seeds = seed.spawn(geometry.n_sensors + 1)
    state = initial_state(scenario, method.n_g, np.random.default_rng(init_seed))
    for s in range(geometry.n_sensors):
        state = sensor_update(state, s, measurements[s], geometry, scenario, method, sensor_seeds[s],
                              record_kappa=record_kappa)
    return state
