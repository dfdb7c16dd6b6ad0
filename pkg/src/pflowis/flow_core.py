"""Closed-form drift, diffusion and diffusion optimization for linearized models.

Every kernel here works on a linear(ized) Gaussian measurement model
``z ~ N(H x + offset, R)`` and a Gaussian prior ``N(mu0, P0)``. The
log-homotopy is ``phi(x, lam) = log N(x; mu0, P0) + lam * log N(z; H x + offset, R)``,
whose negative Hessian is the "homotopy information"
``I(lam) = P0^-1 + lam * H^T R^-1 H``.

All array arguments may carry leading batch dimensions; the public functions
broadcast over them, which is how the integrators migrate many mixture
components at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, SingularMatrixError

__all__ = [
    "LinearizedModel",
    "PriorGaussian",
    "AffineDrift",
    "DiffusionConfig",
    "FAMILIES",
    "homotopy_grad",
    "gromov_drift_affine",
    "gromov_diffusion",
    "optimized_diffusion",
    "optimal_scale",
    "scaled_diffusion",
    "stochastic_drift_affine",
    "condition_number",
    "whitened_condition_number",
    "spd_cholesky",
]

FAMILIES = ("none", "gromov", "optimized")

# Imaginary parts of drift-Jacobian eigenvalues below this fraction of the
# spectral radius are roundoff.
_IMAG_TOL = 1e-8
_JITTER = 1e-9


def _sym(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def _eye_like(S):
    return np.broadcast_to(np.eye(S.shape[-1]), S.shape)


def spd_cholesky(S, name="matrix"):
    """Lower Cholesky factor of a (batch of) symmetric positive definite matrices.

    A jitter of ``1e-9 * trace / n`` on the diagonal is tried once before
    giving up, so matrices that miss positive definiteness by roundoff still
    factorize.
    """
    S = _sym(np.asarray(S, dtype=float))
    if not np.all(np.isfinite(S)):
        raise ConditioningError(f"{name} has non-finite entries")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    n = S.shape[-1]
    jitter = _JITTER * np.abs(np.trace(S, axis1=-2, axis2=-1)) / n
    try:
        return np.linalg.cholesky(S + jitter[..., None, None] * _eye_like(S))
    except np.linalg.LinAlgError:
        raise ConditioningError(f"{name} is not positive definite") from None


def _cho_solve(L, B):
    """Solve (L L^T) X = B for matrix right-hand sides."""
    Y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), Y)


def _cho_solve_vec(L, b):
    return _cho_solve(L, b[..., None])[..., 0]


def _matvec(A, x):
    return np.einsum("...ij,...j->...i", A, x)


@dataclass(frozen=True)
class LinearizedModel:
    """Local measurement model ``z ~ H x + offset + v``, ``v ~ N(0, R)``.

    ``offset = h(x_lin) - H x_lin``; for an exactly linear model it is zero.
    """

    H: np.ndarray
    R: np.ndarray
    z: np.ndarray
    x_lin: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        R = np.asarray(self.R, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if H.ndim < 2 or R.shape[-1] != R.shape[-2]:
            raise ValueError("H must be (..., M, N) and R (..., M, M)")
        if not (H.shape[-2] == R.shape[-1] == z.shape[-1]):
            raise ValueError(
                f"inconsistent dimensions: rows(H)={H.shape[-2]}, "
                f"dim(R)={R.shape[-1]}, dim(z)={z.shape[-1]}"
            )
        offset = np.zeros_like(z) if self.offset is None else np.asarray(self.offset, float)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "offset", offset)

    @property
    def z_eff(self):
        return self.z - self.offset

    def information(self):
        """Return ``(H^T R^-1 H, H^T R^-1 z_eff)``."""
        L = spd_cholesky(self.R, "R")
        RinvH = _cho_solve(L, self.H)
        G = np.swapaxes(self.H, -1, -2) @ RinvH
        r = np.einsum("...mi,...m->...i", RinvH, self.z_eff)
        return _sym(G), r


@dataclass(frozen=True)
class PriorGaussian:
    mu0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float))
        object.__setattr__(self, "P0", _sym(np.asarray(self.P0, dtype=float)))

    def precision(self):
        """Return ``(P0^-1, P0^-1 mu0)`` via a Cholesky factorization."""
        L = spd_cholesky(self.P0, "P0")
        P0inv = _sym(_cho_solve(L, _eye_like(self.P0)))
        return P0inv, _matvec(P0inv, self.mu0)


@dataclass(frozen=True)
class AffineDrift:
    """Drift ``zeta(x) = A x + b`` at pseudo-time ``lam``."""

    A: np.ndarray
    b: np.ndarray
    lam: float

    def __call__(self, x):
        return _matvec(self.A, x) + self.b


@dataclass(frozen=True)
class DiffusionConfig:
    """Selects the diffusion family: ``none`` (deterministic), ``gromov`` or ``optimized``."""

    family: str = "none"
    alpha: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown diffusion family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "optimized":
            if self.alpha is None or not self.alpha > 0:
                raise ValueError("alpha must be > 0 for the optimized family")


def _check_lam(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError(f"pseudo-time must lie in [0, 1], got {lam}")
    return lam


@dataclass
class HomotopyTerms:
    """Quantities shared by every kernel at one pseudo-time.

    ``K = I^-1 G``; ``Iinv = I^-1``; ``L`` is the Cholesky factor of ``I``.
    """

    lam: np.ndarray
    info: np.ndarray
    L: np.ndarray
    Iinv: np.ndarray
    K: np.ndarray
    b_g: np.ndarray
    G: np.ndarray = field(repr=False)
    grad_const: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, lam, P0inv, P0inv_mu0, G, r):
        lam = np.asarray(lam, dtype=float)
        info = _sym(P0inv + lam[..., None, None] * G)
        L = spd_cholesky(info, "homotopy information P0^-1 + lam H^T R^-1 H")
        Iinv = _sym(_cho_solve(L, _eye_like(info)))
        K = Iinv @ G
        b_g = _matvec(Iinv, r)
        # P0^-1 mu0 + lam H^T R^-1 z_eff: the constant part of grad phi
        grad_const = P0inv_mu0 + lam[..., None] * r
        return cls(lam, info, L, Iinv, K, b_g, G, grad_const)

    @classmethod
    def from_models(cls, lam, prior, model):
        P0inv, P0inv_mu0 = prior.precision()
        G, r = model.information()
        return cls.build(_check_lam(lam), P0inv, P0inv_mu0, G, r)

    def gromov_diffusion(self):
        return _sym(self.K @ self.Iinv)

    def deterministic_jacobian(self):
        return -0.5 * self.K

    def drift(self, Q):
        """Affine coefficients of the stochastic drift for diffusion ``Q``."""
        A = -0.5 * self.K - 0.5 * Q @ self.info
        b = self.b_g + 0.5 * _matvec(Q - self.gromov_diffusion(), self.grad_const)
        return A, b

    def optimal_scale(self, alpha):
        A_dg = self.deterministic_jacobian()
        mags = _eigen_magnitudes(A_dg)
        hi = mags.max(axis=-1)
        lo = mags.min(axis=-1)
        return np.maximum(np.sqrt(np.maximum(hi - lo, 0.0) / alpha) - lo, 0.0)

    def scaled_diffusion(self, c):
        return 2.0 * np.asarray(c, dtype=float)[..., None, None] * self.Iinv

    def diffusion(self, diff: DiffusionConfig):
        if diff.family == "none":
            return np.zeros_like(self.K)
        if diff.family == "gromov":
            return self.gromov_diffusion()
        return self.scaled_diffusion(self.optimal_scale(diff.alpha))


def _eigen_magnitudes(A):
    ev = np.linalg.eigvals(A)
    radius = np.abs(ev).max(axis=-1, keepdims=True)
    imag = np.abs(ev.imag)
    if np.any(imag > _IMAG_TOL * np.maximum(radius, np.finfo(float).tiny)):
        warnings.warn(
            "drift Jacobian has eigenvalues with non-negligible imaginary parts; "
            "using complex moduli",
            RuntimeWarning,
            stacklevel=3,
        )
        return np.abs(ev)
    return np.abs(ev.real)


def homotopy_grad(x, lam, prior: PriorGaussian, model: LinearizedModel):
    """Gradient of the log-homotopy at ``x``: ``P0^-1 (mu0 - x) + lam H^T R^-1 (z_eff - H x)``."""
    lam = _check_lam(lam)
    x = np.asarray(x, dtype=float)
    P0inv, _ = prior.precision()
    L = spd_cholesky(model.R, "R")
    innov = model.z_eff - _matvec(model.H, x)
    lik = np.einsum("...mi,...m->...i", model.H, _cho_solve_vec(L, innov))
    return _matvec(P0inv, prior.mu0 - x) + lam[..., None] * lik


def gromov_drift_affine(lam, prior: PriorGaussian, model: LinearizedModel) -> AffineDrift:
    """Gromov drift as ``A x + b`` with ``A = -I^-1 G`` and ``b = I^-1 H^T R^-1 z_eff``."""
    t = HomotopyTerms.from_models(lam, prior, model)
    return AffineDrift(-t.K, t.b_g, float(lam) if np.ndim(lam) == 0 else lam)


def gromov_diffusion(lam, prior: PriorGaussian, model: LinearizedModel):
    """Gromov diffusion ``I^-1 (H^T R^-1 H) I^-1``."""
    return HomotopyTerms.from_models(lam, prior, model).gromov_diffusion()


def optimal_scale(lam, prior: PriorGaussian, model: LinearizedModel, alpha):
    """Closed-form minimizer ``c*`` of ``kappa(A_s(c)) + alpha c``.

    ``c* = max(sqrt((|l|max - |l|min) / alpha) - |l|min, 0)`` with the
    eigenvalue magnitudes of the deterministic-Gromov Jacobian
    ``A_dg = -1/2 I^-1 H^T R^-1 H``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return HomotopyTerms.from_models(lam, prior, model).optimal_scale(alpha)


def scaled_diffusion(lam, prior: PriorGaussian, model: LinearizedModel, c):
    """Diffusion of the scale family, ``Q(c) = 2 c I^-1``.

    The factor two makes the stochastic drift Jacobian exactly ``A_dg - c I``,
    the parameterization under which the closed-form ``c*`` is the minimizer.
    """
    return HomotopyTerms.from_models(lam, prior, model).scaled_diffusion(c)


def optimized_diffusion(lam, prior: PriorGaussian, model: LinearizedModel, alpha):
    """Return ``(Q*, c*)`` with ``Q* = scaled_diffusion(c*)``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    t = HomotopyTerms.from_models(lam, prior, model)
    c = t.optimal_scale(alpha)
    Q = t.scaled_diffusion(c)
    return Q, (float(c) if np.ndim(c) == 0 else c)


def stochastic_drift_affine(lam, prior: PriorGaussian, model: LinearizedModel, Q) -> AffineDrift:
    """Stochastic drift built from the deterministic-Gromov flow and diffusion ``Q``.

    ``A_s = -1/2 I^-1 G - 1/2 Q I`` and
    ``b_s = I^-1 H^T R^-1 z_eff + 1/2 (Q - Q_g)(P0^-1 mu0 + lam H^T R^-1 z_eff)``.
    """
    Q = np.asarray(Q, dtype=float)
    N = np.shape(prior.mu0)[-1]
    if Q.shape[-2:] != (N, N):
        raise ValueError(f"Q must be {N}x{N}, got {Q.shape[-2:]}")
    t = HomotopyTerms.from_models(lam, prior, model)
    A, b = t.drift(Q)
    return AffineDrift(A, b, float(lam) if np.ndim(lam) == 0 else lam)


def condition_number(A):
    """Ratio of the largest to the smallest singular value of ``A``."""
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    smax, smin = s[..., 0], s[..., -1]
    threshold = smax * max(np.shape(A)[-2:]) * np.finfo(float).eps
    if np.any(smin <= threshold) or np.any(smax == 0):
        raise SingularMatrixError("matrix is numerically singular")
    out = smax / smin
    return float(out) if np.ndim(out) == 0 else out


def whitened_condition_number(A, L):
    """Condition number of ``A`` in the coordinates ``y = L^T x``.

    ``L`` is the Cholesky factor of the homotopy information. Every drift
    Jacobian of the flows here is similar, through this change of variables,
    to a symmetric matrix, so the result is the ratio of the largest to the
    smallest eigenvalue magnitude. Singular matrices give ``inf``.
    """
    LtA = np.swapaxes(L, -1, -2) @ A
    # X = L^T A L^-T  <=>  X^T = L^-1 (L^T A)^T
    X = np.swapaxes(np.linalg.solve(L, np.swapaxes(LtA, -1, -2)), -1, -2)
    s = np.linalg.svd(X, compute_uv=False)
    smax, smin = s[..., 0], s[..., -1]
    threshold = smax * A.shape[-1] * np.finfo(float).eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(smin > threshold, smax / np.where(smin > 0, smin, 1.0), np.inf)
    return float(out) if np.ndim(out) == 0 else out
