"""3-D TDOA measurement model, geometry and synthetic data with clutter and missed detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow_core import LinearizedModel

__all__ = [
    "SensorGeometry",
    "ScenarioConfig",
    "MeasurementSet",
    "DEFAULT_PAIRS",
    "default_geometry",
    "tdoa_predict",
    "tdoa_jacobian",
    "tdoa_hessian",
    "curvature_variance",
    "draw_sources",
    "generate_measurements",
    "tdoa_relinearizer",
]

# Receivers sit at the face centres of the ROI cube, indexed
# 0:+x 1:-x 2:+y 3:-y 4:+z 5:-z. Three opposite pairs plus six adjacent pairs.
DEFAULT_PAIRS = ((0, 1), (2, 3), (4, 5), (0, 2), (0, 4), (2, 4), (1, 3), (1, 5), (3, 5))

_EPS = 1e-6


@dataclass(frozen=True)
class SensorGeometry:
    receivers: np.ndarray
    sensors: np.ndarray
    c_prop: float = 1500.0

    def __post_init__(self):
        rec = np.asarray(self.receivers, dtype=float)
        sen = np.asarray(self.sensors, dtype=int).reshape(-1, 2)
        if rec.ndim != 2 or rec.shape[1] != 3:
            raise ValueError("receivers must be (V, 3)")
        if np.any(sen[:, 0] == sen[:, 1]):
            raise ValueError("a sensor needs two distinct receivers")
        if np.any(sen < 0) or np.any(sen >= len(rec)):
            raise ValueError("sensor receiver index out of range")
        if not self.c_prop > 0:
            raise ValueError("c_prop must be positive")
        object.__setattr__(self, "receivers", rec)
        object.__setattr__(self, "sensors", sen)

    @property
    def n_sensors(self) -> int:
        return len(self.sensors)

    def pair(self, sensor):
        """Receiver positions ``(p_a, p_b)`` of a sensor index or explicit ``(a, b)`` pair."""
        a, b = self.sensors[sensor] if np.ndim(sensor) == 0 else sensor
        return self.receivers[a], self.receivers[b]

    def max_tdoa(self, sensor) -> float:
        pa, pb = self.pair(sensor)
        return float(np.linalg.norm(pa - pb) / self.c_prop)


def default_geometry(half_width: float = 1000.0, c_prop: float = 1500.0, pairs=DEFAULT_PAIRS) -> SensorGeometry:
    h = half_width
    receivers = np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0], [0, -h, 0], [0, 0, h], [0, 0, -h]], dtype=float)
    return SensorGeometry(receivers, np.array(pairs), c_prop)


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario parameters; defaults follow the published setup.

    ``sources=None`` means ``n_sources`` positions are drawn uniformly inside
    ``source_margin * roi_half_width`` for every Monte Carlo run.
    """

    roi_half_width: float = 1000.0
    sources: tuple | None = None
    n_sources: int = 3
    source_margin: float = 0.9
    sigma_v: float = 0.5e-3
    c_prop: float = 1500.0
    p_d: float = 0.95
    mu_c: float = 1.0
    n_g: int = 100
    n_p: int = 5000
    pairs: tuple = DEFAULT_PAIRS
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.p_d <= 1):
            raise ValueError("p_d must lie in (0, 1]")
        if not self.mu_c >= 0:
            raise ValueError("mu_c must be >= 0")
        if not self.sigma_v > 0:
            raise ValueError("sigma_v must be > 0")
        if not self.roi_half_width > 0:
            raise ValueError("roi_half_width must be > 0")
        if self.sources is not None:
            src = np.asarray(self.sources, dtype=float).reshape(-1, 3)
            if np.any(np.abs(src) > self.roi_half_width):
                raise ValueError("sources must lie inside the ROI")

    def geometry(self) -> SensorGeometry:
        return default_geometry(self.roi_half_width, self.c_prop, self.pairs)


@dataclass
class MeasurementSet:
    """Unlabeled TDOA values (seconds), one array per sensor."""

    per_sensor: list = field(default_factory=list)

    def __len__(self):
        return len(self.per_sensor)

    def __getitem__(self, s):
        return self.per_sensor[s]


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise ValueError("state contains NaN")
    return x


def tdoa_predict(x, sensor, geometry: SensorGeometry):
    """``(|x - p_a| - |x - p_b|) / c`` for a state ``(3,)`` or batch ``(..., 3)``."""
    x = _check_finite(x)
    pa, pb = geometry.pair(sensor)
    out = (np.linalg.norm(x - pa, axis=-1) - np.linalg.norm(x - pb, axis=-1)) / geometry.c_prop
    return float(out) if np.ndim(out) == 0 else out


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return v / n, n[..., 0]


def tdoa_jacobian(x, sensor, geometry: SensorGeometry):
    """Row Jacobian of :func:`tdoa_predict`, shape ``(1, 3)`` (or ``(..., 1, 3)`` for a batch)."""
    x = _check_finite(x)
    pa, pb = geometry.pair(sensor)
    ua, na = _unit(x - pa)
    ub, nb = _unit(x - pb)
    if np.any(na <= _EPS) or np.any(nb <= _EPS):
        raise ValueError("linearization point within 1e-6 m of a receiver")
    return ((ua - ub) / geometry.c_prop)[..., None, :]


def draw_sources(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    if config.sources is not None:
        return np.asarray(config.sources, dtype=float).reshape(-1, 3)
    lim = config.source_margin * config.roi_half_width
    return rng.uniform(-lim, lim, size=(config.n_sources, 3))


def generate_measurements(config: ScenarioConfig, geometry: SensorGeometry, rng: np.random.Generator,
                          sources=None) -> MeasurementSet:
    """Per sensor: detections with probability ``p_d`` plus Poisson(``mu_c``) uniform clutter, shuffled."""
    src = draw_sources(config, rng) if sources is None else np.asarray(sources, dtype=float).reshape(-1, 3)
    out = []
    for s in range(geometry.n_sensors):
        detected = rng.random(len(src)) < config.p_d
        z_true = tdoa_predict(src[detected], s, geometry) if detected.any() else np.empty(0)
        z_src = np.atleast_1d(z_true) + config.sigma_v * rng.standard_normal(int(detected.sum()))
        d = geometry.max_tdoa(s)
        n_clutter = rng.poisson(config.mu_c)
        z_clutter = rng.uniform(-d, d, size=n_clutter)
        z = np.concatenate([z_src, z_clutter])
        out.append(z[rng.permutation(len(z))])
    return MeasurementSet(out)


def tdoa_hessian(x, sensor, geometry: SensorGeometry):
    """Hessian of :func:`tdoa_predict`, shape ``(3, 3)`` (or ``(..., 3, 3)``)."""
    x = _check_finite(x)
    pa, pb = geometry.pair(sensor)
    ua, na = _unit(x - pa)
    ub, nb = _unit(x - pb)
    if np.any(na <= _EPS) or np.any(nb <= _EPS):
        raise ValueError("linearization point within 1e-6 m of a receiver")
    eye = np.eye(3)
    Ha = (eye - ua[..., :, None] * ua[..., None, :]) / na[..., None, None]
    Hb = (eye - ub[..., :, None] * ub[..., None, :]) / nb[..., None, None]
    return (Ha - Hb) / geometry.c_prop


def curvature_variance(x, P, sensor, geometry: SensorGeometry):
    """Variance ``tr(Hxx P Hxx P) / 2`` of the second-order term of ``h`` under ``N(x, P)``."""
    M = tdoa_hessian(x, sensor, geometry) @ np.asarray(P, dtype=float)
    return 0.5 * np.einsum("...ij,...ji->...", M, M)


def tdoa_relinearizer(z, sensor, geometry: SensorGeometry, sigma_v: float, covs=None):
    """Batched relinearizer for one scalar TDOA measurement.

    With ``covs`` (one covariance per batch row), the noise variance is
    inflated by :func:`curvature_variance` at the linearization point, so the
    linear model accounts for the curvature of the hyperboloid over the
    extent of each component. Linearization points within 1e-6 m of a
    receiver are shifted by 1e-5 m so the Jacobian stays defined.
    """
    pa, pb = geometry.pair(sensor)
    R = np.array([[sigma_v ** 2]])
    z = float(z)

    def relinearize(means):
        X = np.array(means, dtype=float, copy=True)
        for p in (pa, pb):
            near = np.linalg.norm(X - p, axis=-1) <= _EPS
            if np.any(near):
                X[near] += 10 * _EPS
        H = tdoa_jacobian(X, sensor, geometry)
        h = tdoa_predict(X, sensor, geometry)
        offset = np.asarray(h)[..., None] - np.einsum("...mi,...i->...m", H, X)
        shape = X.shape[:-1]
        Rb = np.broadcast_to(R, shape + (1, 1))
        if covs is not None:
            Rb = Rb + curvature_variance(X, covs, sensor, geometry)[..., None, None]
        return LinearizedModel(H, Rb,
                               np.full(shape + (1,), z), X, offset)

    return relinearize
