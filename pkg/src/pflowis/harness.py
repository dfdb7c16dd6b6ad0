"""Monte Carlo runner, OSPA metric, stiffness traces and invariant checks."""

from __future__ import annotations

import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .flow_core import LinearizedModel
from .flow_integrate import migrate_batch
from .estimator import MethodConfig, estimate_sources, run_estimator, substream
from .tdoa import ScenarioConfig, SensorGeometry, draw_sources, generate_measurements

__all__ = [
    "OSPA_CUTOFF",
    "ospa",
    "RunReport",
    "AggregateRow",
    "run_single",
    "run_monte_carlo",
    "aggregate",
    "stiffness_trace",
    "kalman_update",
]

OSPA_CUTOFF = 30.0


def ospa(est, truth, cutoff: float = OSPA_CUTOFF, order: float = 2.0) -> float:
    """OSPA distance between two finite sets of points (rows).

    Distances are clipped at ``cutoff``; every unmatched point costs
    ``cutoff``. Two empty sets are at distance 0.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    if not order >= 1:
        raise ValueError("order must be >= 1")
    X = np.asarray(est, dtype=float)
    Y = np.asarray(truth, dtype=float)
    X = X.reshape(-1, Y.shape[-1] if Y.size else (X.shape[-1] if X.ndim > 1 else 1))
    Y = Y.reshape(-1, X.shape[1])
    m, n = len(X), len(Y)
    if m == 0 and n == 0:
        return 0.0
    if m == 0 or n == 0:
        return float(cutoff)
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1), cutoff) ** order
    rows, cols = linear_sum_assignment(D)
    cost = D[rows, cols].sum() + cutoff ** order * abs(m - n)
    return float((cost / max(m, n)) ** (1.0 / order))


@dataclass
class RunReport:
    """One (method, run) outcome. ``kappa`` holds one per-step trace per sensor (``None`` for BS)."""

    method: str
    seed: int
    ospa: float
    runtime_s: float
    ess: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    n_lambda: int = 0
    fallbacks: int = 0
    complete: bool = True
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def mean_ess(self) -> float:
        vals = [e for e in self.ess if np.isfinite(e)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_kappa(self) -> float:
        traces = [k for k in self.kappa if k is not None and len(k)]
        if not traces:
            return float("nan")
        return float(np.mean(np.concatenate(traces)))


@dataclass(frozen=True)
class AggregateRow:
    method: str
    n_runs: int
    n_failed: int
    mean_ospa: float
    mean_runtime_s: float


def run_single(scenario: ScenarioConfig, method: MethodConfig, seed: int,
               geometry: SensorGeometry | None = None, record_kappa: bool = True) -> RunReport:
    """Draw sources and measurements from ``seed`` and run one estimator on them.

    Sources and measurements depend only on ``seed``, so all methods run with
    the same seed see identical data. Exceptions are caught and recorded.
    """
    geometry = scenario.geometry() if geometry is None else geometry
    try:
        data_rng = np.random.default_rng(substream(seed, "data"))
        truth = draw_sources(scenario, data_rng)
        meas = generate_measurements(scenario, geometry, data_rng, truth)
        t0 = time.perf_counter()
        state = run_estimator(scenario, geometry, meas, method, substream(seed, "estimator", method.name),
                              record_kappa=record_kappa)
        est, complete = estimate_sources(state, len(truth))
        runtime = time.perf_counter() - t0
    except Exception as exc:  # a failed run is data, not a crash of the whole experiment
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return RunReport(method.name, seed, float("nan"), float("nan"), error=msg)
    diags = state.diagnostics
    return RunReport(
        method=method.name,
        seed=seed,
        ospa=ospa(est, truth),
        runtime_s=max(runtime, 1e-9),
        ess=[d.ess for d in diags],
        kappa=[d.kappa for d in diags],
        n_lambda=method.schedule.n_steps if method.schedule is not None else 0,
        fallbacks=sum(d.fallback for d in diags),
        complete=complete,
    )


def _run_job(args):
    return run_single(*args)


def run_monte_carlo(scenario: ScenarioConfig, methods, n_runs: int, master_seed: int = 0,
                    jobs: int = 1, record_kappa: bool = True) -> list[RunReport]:
    """Run every method on runs ``seed = master_seed + r`` for ``r < n_runs``.

    Results come back in (method, run) order whatever ``jobs`` is.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    geometry = scenario.geometry()
    tasks = [(scenario, m, master_seed + r, geometry, record_kappa) for m in methods for r in range(n_runs)]
    if jobs <= 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))


def aggregate(reports) -> list[AggregateRow]:
    """Per-method mean OSPA and runtime over successful runs, in order of first appearance."""
    groups: dict[str, list[RunReport]] = {}
    for rep in reports:
        groups.setdefault(rep.method, []).append(rep)
    rows = []
    for name, reps in groups.items():
        ok = [r for r in reps if not r.failed]
        mean = (lambda v: math.fsum(v) / len(v)) if ok else (lambda v: float("nan"))
        rows.append(AggregateRow(name, len(ok), len(reps) - len(ok),
                                 mean([r.ospa for r in ok]), mean([r.runtime_s for r in ok])))
    return rows


def stiffness_trace(method: MethodConfig, mu0, P0, models) -> list[tuple[float, float]]:
    """``(lambda_l, kappa(A_s))`` for every pseudo-time step of one migrated Gaussian.

    ``models`` is a fixed :class:`LinearizedModel` or a relinearizer mapping
    a mean ``(N,)`` to one. Singular drift Jacobians show up as ``inf``.
    """
    if method.method == "BS":
        raise ValueError("the bootstrap method has no flow")
    schedule = method.schedule

    def relin(mu):
        m = models if isinstance(models, LinearizedModel) else models(mu[0])
        H = np.asarray(m.H, dtype=float)
        offset = np.zeros(H.shape[0]) if m.offset is None else np.asarray(m.offset, dtype=float)
        return LinearizedModel(H[None], np.asarray(m.R, dtype=float)[None],
                               np.asarray(m.z, dtype=float)[None], None, offset[None])

    res = migrate_batch(np.asarray(mu0, dtype=float)[None], np.asarray(P0, dtype=float)[None], relin,
                        schedule, method.diffusion, record_kappa=True)
    return [(float(lam), float(k)) for lam, k in zip(schedule.lambdas[1:], res.kappa[:, 0])]


def kalman_update(mu0, P0, H, R, z, offset=None):
    """Conjugate Gaussian posterior ``(mu, P)`` for ``z ~ N(H x + offset, R)``, in Joseph form."""
    mu0 = np.asarray(mu0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if offset is not None:
        z = z - np.asarray(offset, dtype=float)
    S = H @ P0 @ H.T + R
    K = np.linalg.solve(S, H @ P0).T
    mu = mu0 + K @ (z - H @ mu0)
    F = np.eye(len(mu0)) - K @ H
    P = F @ P0 @ F.T + K @ R @ K.T
    return mu, 0.5 * (P + P.T)
