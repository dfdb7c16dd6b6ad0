"""Flow-induced Gaussian-mixture proposals, importance weighting and mixture reduction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConditioningError, DegenerateWeightsError, FlowError
from .flow_core import DiffusionConfig, spd_cholesky
from .flow_integrate import FlowSchedule, GaussianComponent, migrate_batch

__all__ = [
    "GaussianMixture",
    "WeightedSamples",
    "Proposal",
    "build_proposal",
    "sample_mixture",
    "evaluate_log_gmm",
    "importance_weights",
    "effective_sample_size",
    "reduce_mixture",
    "merge_moments",
]

_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture stored as stacked arrays: ``means (K, N)``, ``covs (K, N, N)``, ``log_weights (K,)``."""

    means: np.ndarray
    covs: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float).reshape(len(means), means.shape[1], means.shape[1])
        lw = np.asarray(self.log_weights, dtype=float).reshape(len(means))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "log_weights", lw)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self):
        return len(self.means)

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(m, P, lw) for m, P, lw in zip(self.means, self.covs, self.log_weights)]

    @classmethod
    def from_components(cls, comps: Sequence[GaussianComponent]) -> "GaussianMixture":
        return cls(np.stack([c.mu for c in comps]), np.stack([c.P for c in comps]),
                   np.array([c.log_w for c in comps]))

    def normalized(self) -> "GaussianMixture":
        return GaussianMixture(self.means, self.covs, self.log_weights - logsumexp(self.log_weights))

    def equal_weights(self) -> "GaussianMixture":
        """Same components with weights ``1/K``: the density that :func:`sample_mixture` draws from."""
        return GaussianMixture(self.means, self.covs, np.full(len(self), -np.log(len(self))))

    def subset(self, idx) -> "GaussianMixture":
        return GaussianMixture(self.means[idx], self.covs[idx], self.log_weights[idx])

    def moments(self):
        """Overall mean and covariance of the (normalized) mixture."""
        w = np.exp(self.log_weights - logsumexp(self.log_weights))
        mean = w @ self.means
        d = self.means - mean
        cov = np.einsum("k,kij->ij", w, self.covs) + np.einsum("k,ki,kj->ij", w, d, d)
        return mean, cov


@dataclass(frozen=True)
class WeightedSamples:
    """Samples with self-normalized log-weights; ``component`` records the proposal component of origin."""

    states: np.ndarray
    log_weights: np.ndarray
    component: np.ndarray | None = None

    @property
    def weights(self):
        return np.exp(self.log_weights)


# terms more than this many nats below a row's maximum are clamped to it before
# exponentiating: they change the row sum by at most K * exp(-50) relative, far
# below double precision, and exp of huge negative arguments is slow
_LSE_FLOOR = 50.0


def _rowwise_logsumexp(a):
    m = a.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    d = a - safe[:, None]
    np.maximum(d, -_LSE_FLOOR, out=d)
    np.exp(d, out=d)
    return np.where(m == -np.inf, -np.inf, safe + np.log(d.sum(axis=1)))


def _quadratic_features(X, iu):
    return np.concatenate([X[:, iu[0]] * X[:, iu[1]], X, np.ones((len(X), 1))], axis=1)


def evaluate_log_gmm(gmm: GaussianMixture, x, chunk: int = 4096):
    """``log sum_k w_k N(x; mu_k, P_k)`` for one state ``(N,)`` or a batch ``(S, N)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    K, N = gmm.means.shape
    if X.shape[1] != N:
        raise ValueError(f"state dimension {X.shape[1]} does not match mixture dimension {N}")
    # a canonical component order makes the floating-point sums, and so the
    # result, exactly independent of how the mixture was listed
    keys = np.column_stack([gmm.log_weights, gmm.means, gmm.covs.reshape(K, -1)])
    order = np.lexsort(keys.T[::-1])
    gmm = GaussianMixture(gmm.means[order], gmm.covs[order], gmm.log_weights[order])
    L = spd_cholesky(gmm.covs, "mixture covariance")
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(N), L.shape))
    Lam = np.swapaxes(Linv, 1, 2) @ Linv
    # every component log-density is a quadratic polynomial in x, so one matrix
    # product of quadratic features [x_i x_j (i <= j), x, 1] evaluates all K at
    # once; centering on the mixture mean keeps the expansion well conditioned
    ref = gmm.means.mean(axis=0)
    mu = gmm.means - ref
    iu = np.triu_indices(N)
    quad = -0.5 * Lam[:, iu[0], iu[1]] * np.where(iu[0] == iu[1], 1.0, 2.0)
    lin = np.einsum("kij,kj->ki", Lam, mu)
    const = (gmm.log_weights
             - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
             - 0.5 * N * _LOG_2PI
             - 0.5 * np.einsum("ki,ki->k", mu, lin))
    coef = np.concatenate([quad, lin, const[:, None]], axis=1).T
    out = np.empty(len(X))
    for start in range(0, len(X), chunk):
        out[start:start + chunk] = _rowwise_logsumexp(_quadratic_features(X[start:start + chunk] - ref, iu) @ coef)
    return float(out[0]) if single else out


def sample_mixture(gmm: GaussianMixture, n_per_component: int, rngs) -> WeightedSamples:
    """Draw ``n_per_component`` samples from every component.

    ``rngs`` is either one generator or a sequence with one generator per
    component. Since every component gets the same number of draws, the
    sampling density is ``gmm.equal_weights()`` regardless of the mixture
    weights, and that is the density to divide by when weighting. The
    returned log-weights are uniform placeholders.
    """
    K, N = gmm.means.shape
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs] * K
    L = spd_cholesky(gmm.covs, "mixture covariance")
    eps = np.stack([rng.standard_normal((n_per_component, N)) for rng in rngs])
    states = gmm.means[:, None, :] + eps @ np.swapaxes(L, 1, 2)
    states = states.reshape(K * n_per_component, N)
    comp = np.repeat(np.arange(K), n_per_component)
    lw = np.full(len(states), -np.log(len(states)))
    return WeightedSamples(states, lw, comp)


def importance_weights(samples, prior: GaussianMixture, log_likelihood: Callable,
                       proposal: GaussianMixture) -> WeightedSamples:
    """Self-normalized weights ``prior(x) * likelihood(x) / proposal(x)``.

    ``samples`` is an ``(S, N)`` array or a :class:`WeightedSamples`;
    ``log_likelihood`` is evaluated on the whole ``(S, N)`` batch.
    """
    comp = None
    if isinstance(samples, WeightedSamples):
        comp = samples.component
        samples = samples.states
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    lw = (evaluate_log_gmm(prior, X) + np.asarray(log_likelihood(X), dtype=float)
          - evaluate_log_gmm(proposal, X))
    lw = np.where(np.isnan(lw), -np.inf, lw)
    total = logsumexp(lw)
    if not np.isfinite(total):
        raise DegenerateWeightsError("all importance weights are zero")
    return WeightedSamples(X, lw - total, comp)


def effective_sample_size(w) -> float:
    """``1 / sum(w_i^2)`` for normalized weights (``WeightedSamples`` or an array of weights)."""
    if isinstance(w, WeightedSamples):
        return float(np.exp(-logsumexp(2 * w.log_weights)))
    w = np.asarray(w, dtype=float)
    return float(1.0 / np.sum(w * w))


@dataclass
class Proposal:
    """Flow-induced proposal plus bookkeeping.

    ``source`` holds, per component, ``(prior component, measurement)`` with
    measurement ``-1`` for an un-migrated (missed-detection) copy.
    ``kappa`` is the per-step stiffness trace of every migrated component.
    """

    mixture: GaussianMixture
    source: np.ndarray
    kappa: np.ndarray | None = None
    n_steps: int = 0


def build_proposal(prior: GaussianMixture, measurements, relinearize_factory, schedule: FlowSchedule,
                   diff: DiffusionConfig, *, missed_log_factor: float | None = None,
                   detection_log_factor: float = 0.0, prune_log_ratio: float | None = None,
                   record_kappa: bool = False) -> Proposal:
    """Migrate every (prior component, measurement) pair through the flow.

    ``measurements`` is a sequence of ``(z, sensor)``;
    ``relinearize_factory(z, sensor, covs)`` returns a batched relinearizer
    mapping means ``(K, N)`` to a :class:`~pflowis.flow_core.LinearizedModel`,
    where ``covs`` are the prior covariances (available for model-error
    inflation). A pair's log-weight is the
    prior log-weight plus ``detection_log_factor`` plus the log predictive
    likelihood ``log N(z; h(mu_k), H P_k H^T + R)`` linearized at the prior
    mean. With ``missed_log_factor`` set, each prior component also enters
    unchanged with that extra log-weight. With ``prune_log_ratio`` set, pairs
    whose weight falls more than that many nats below the best pair of the
    same prior component are dropped.
    """
    prior = prior.normalized()
    K = len(prior)
    if len(measurements) == 0:
        return Proposal(prior, np.column_stack([np.arange(K), np.full(K, -1)]))

    means, covs, logw, source, kappas = [], [], [], [], []
    n_steps = schedule.n_steps
    for m, (z, sensor) in enumerate(measurements):
        relin = relinearize_factory(z, sensor, prior.covs)
        model0 = relin(prior.means)
        S = model0.H @ prior.covs @ np.swapaxes(model0.H, 1, 2) + model0.R
        innov = model0.z - np.einsum("kmi,ki->km", model0.H, prior.means) - model0.offset
        try:
            LS = spd_cholesky(S, "predictive covariance")
        except ConditioningError as exc:
            raise FlowError(str(exc), step=0, index=("measurement", m)) from exc
        y = np.linalg.solve(LS, innov[..., None])[..., 0]
        log_pred = (-0.5 * np.sum(y * y, axis=1) - np.log(np.diagonal(LS, axis1=1, axis2=2)).sum(axis=1)
                    - 0.5 * S.shape[-1] * _LOG_2PI)
        logw.append(prior.log_weights + detection_log_factor + log_pred)
        source.append(np.column_stack([np.arange(K), np.full(K, m)]))

    logw = np.concatenate(logw)
    source = np.concatenate(source)
    if missed_log_factor is not None:
        logw = np.concatenate([logw, prior.log_weights + missed_log_factor])
        source = np.concatenate([source, np.column_stack([np.arange(K), np.full(K, -1)])])
    keep = np.ones(len(logw), dtype=bool)
    if prune_log_ratio is not None:
        best = np.full(K, -np.inf)
        np.maximum.at(best, source[:, 0], logw)
        keep = logw >= best[source[:, 0]] - prune_log_ratio

    for m, (z, sensor) in enumerate(measurements):
        rows = np.flatnonzero(keep & (source[:, 1] == m))
        if len(rows) == 0:
            continue
        k = source[rows, 0]
        try:
            res = migrate_batch(prior.means[k], prior.covs[k], relinearize_factory(z, sensor, prior.covs[k]),
                                schedule, diff, record_kappa=record_kappa)
        except FlowError as exc:
            raise FlowError(f"flow failed for measurement {m}: {exc}", step=exc.step,
                            index=(None if exc.index is None else (int(k[exc.index[0]]), m))) from exc
        means.append((rows, res.mu))
        covs.append(res.P)
        if record_kappa:
            kappas.append(res.kappa)

    out_means = np.empty((len(logw), prior.dim))
    out_covs = np.empty((len(logw), prior.dim, prior.dim))
    missed = source[:, 1] < 0
    out_means[missed] = prior.means[source[missed, 0]]
    out_covs[missed] = prior.covs[source[missed, 0]]
    for (rows, mu), P in zip(means, covs):
        out_means[rows] = mu
        out_covs[rows] = P
    mix = GaussianMixture(out_means[keep], out_covs[keep], logw[keep]).normalized()
    kappa = np.concatenate(kappas, axis=1) if record_kappa and kappas else None
    return Proposal(mix, source[keep], kappa, n_steps)


def merge_moments(w, means, covs):
    """Moment-matched single Gaussian of weighted components; returns ``(w_total, mean, cov)``."""
    w = np.asarray(w, dtype=float)
    W = w.sum()
    mean = (w @ means) / W
    d = means - mean
    cov = (np.einsum("k,kij->ij", w, covs) + np.einsum("k,ki,kj->ij", w, d, d)) / W
    return W, mean, 0.5 * (cov + cov.T)


def _fit_groups(samples: WeightedSamples, proposal: GaussianMixture | None, shrinkage: float | None):
    """One Gaussian per proposal component, fitted to that component's weighted samples.

    With few effective samples the weighted covariance is unreliable (rank
    deficient at ESS near 1), so it is shrunk toward the proposal component's
    covariance with ``shrinkage`` pseudo-samples.
    """
    N = samples.states.shape[1]
    comp = samples.component if samples.component is not None else np.zeros(len(samples.states), dtype=int)
    # segment sums over samples sorted by component
    order = np.argsort(comp, kind="stable")
    X = samples.states[order]
    lw = samples.log_weights[order]
    groups, starts, counts = np.unique(comp[order], return_index=True, return_counts=True)
    seg = np.repeat(np.arange(len(groups)), counts)
    top = np.maximum.reduceat(lw, starts)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        tot = safe_top + np.log(np.add.reduceat(np.exp(lw - safe_top[seg]), starts))
    keep = np.isfinite(tot)
    if not keep.any():
        raise DegenerateWeightsError("no component carries weight")
    w = np.exp(lw - np.where(keep, tot, 0.0)[seg])
    mu = np.add.reduceat(w[:, None] * X, starts)
    d = X - mu[seg]
    S = np.add.reduceat(w[:, None, None] * d[:, :, None] * d[:, None, :], starts)
    if proposal is not None and shrinkage:
        ess = 1.0 / np.add.reduceat(w * w, starts)
        S = ((ess[:, None, None] * S + shrinkage * proposal.covs[groups])
             / (ess + shrinkage)[:, None, None])
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    return GaussianMixture(mu[keep], S[keep].reshape(-1, N, N), tot[keep])


def _sym_kl(means, covs, precs, i, js):
    """Symmetrized KL divergence between component ``i`` and components ``js``."""
    N = means.shape[1]
    d = means[js] - means[i]
    tr = (np.einsum("jab,ba->j", precs[js], covs[i]) + np.einsum("ab,jba->j", precs[i], covs[js]))
    maha = np.einsum("ja,jab,jb->j", d, precs[js] + precs[i], d)
    return 0.5 * (tr - 2 * N + maha)


def reduce_mixture(x, target: int, *, proposal: GaussianMixture | None = None,
                   shrinkage: float | None = None, drop_ratio: float = 1e-6) -> GaussianMixture:
    """Reduce a mixture (or weighted samples) to at most ``target`` components.

    Weighted samples are first turned into one Gaussian per proposal
    component. Components lighter than ``drop_ratio / target`` are dropped,
    then the pair with the smallest weighted symmetrized KL cost
    ``w_i w_j / (w_i + w_j) * KL_sym`` is merged by moment matching until
    ``target`` components remain.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    if isinstance(x, WeightedSamples):
        if len(x.states) == 0:
            raise ValueError("cannot reduce an empty sample set")
        if shrinkage is None:
            shrinkage = x.states.shape[1] + 2.0
        gmm = _fit_groups(x, proposal, shrinkage).normalized()
    else:
        if len(x) == 0:
            raise ValueError("cannot reduce an empty mixture")
        gmm = x.normalized()
    if len(gmm) <= target:
        return gmm

    w = gmm.weights
    keep = w >= drop_ratio / target
    if keep.sum() == 0:
        keep = w == w.max()
    gmm = gmm.subset(keep).normalized()
    if len(gmm) <= target:
        return gmm

    means = gmm.means.copy()
    covs = gmm.covs.copy()
    w = gmm.weights.copy()
    L = spd_cholesky(covs, "mixture covariance")
    precs = np.linalg.solve(np.swapaxes(L, 1, 2), np.linalg.solve(L, np.broadcast_to(np.eye(gmm.dim), covs.shape)))
    K = len(w)
    alive = np.ones(K, dtype=bool)
    cost = np.full((K, K), np.inf)
    for i in range(K - 1):
        js = np.arange(i + 1, K)
        cost[i, js] = w[i] * w[js] / (w[i] + w[js]) * _sym_kl(means, covs, precs, i, js)

    n_alive = K
    while n_alive > target:
        flat = int(np.argmin(cost))
        i, j = divmod(flat, K)
        Wt, mu, P = merge_moments(w[[i, j]], means[[i, j]], covs[[i, j]])
        w[i], means[i], covs[i] = Wt, mu, P
        precs[i] = np.linalg.inv(P)
        alive[j] = False
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        n_alive -= 1
        others = np.flatnonzero(alive)
        others = others[others != i]
        c = w[i] * w[others] / (w[i] + w[others]) * _sym_kl(means, covs, precs, i, others)
        lo, hi = others[others < i], others[others > i]
        cost[lo, i] = c[others < i]
        cost[i, hi] = c[others > i]

    idx = np.flatnonzero(alive)
    return GaussianMixture(means[idx], covs[idx], np.log(w[idx])).normalized()
