"""Sparse Bayesian learning primitives shared by every estimator.

Model::

    y = Phi w + n,        n ~ CN(0, alpha^-1 I)
    w ~ CN(0, diag(gamma)^-1)
    alpha, gamma_l ~ Gamma(1 + a, rate=b)

The posterior of ``w`` is Gaussian with covariance
``Sigma = (alpha Phi^H Phi + diag(gamma))^-1`` and mean
``mu = alpha Sigma Phi^H y``.  When the system has fewer rows than columns
the covariance is formed through the Woodbury identity so that one call
costs ``O(T L^2)`` instead of ``O(L^3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from . import _ops
from ._ops import mm
from .array_model import (
    ArrayGeometry,
    steering_2d,
    steering_deriv_phi,
    steering_deriv_theta,
    steering_linear,
)

__all__ = [
    "Hyperpriors",
    "SblState",
    "Posterior",
    "OffGridDictionary",
    "GAMMA_MAX",
    "compute_posterior",
    "update_alpha",
    "update_gamma",
    "log_evidence",
    "gamma_log_prior",
    "extract_channel",
    "initial_state",
    "NumericalError",
]

GAMMA_MAX = 1e12


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Hyperpriors:
    """Shape offset ``a`` and rate ``b`` of the Gamma hyperpriors."""

    a: float = 1e-4
    b: float = 1e-4

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"hyperprior parameters must be positive, got a={self.a}, b={self.b}")


class Posterior(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True, eq=False)
class SblState:
    """Snapshot of hyperparameters and the posterior they induce."""

    alpha: float
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    phi_hat: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if np.any(~(self.gamma > 0)):
            raise ValueError("gamma must be positive element-wise")

    @property
    def n_grid(self) -> int:
        return self.gamma.size

    def with_posterior(self, post: Posterior) -> "SblState":
        return replace(self, mu=post.mu, sigma=post.sigma)


def initial_state(n_grid: int, phi_hat: np.ndarray | None = None) -> SblState:
    """All-ones precisions, unit noise precision, zero offsets; empty posterior."""
    return SblState(
        alpha=1.0,
        gamma=np.ones(n_grid),
        beta=np.zeros(n_grid),
        mu=np.zeros(n_grid, dtype=complex),
        sigma=np.eye(n_grid, dtype=complex),
        phi_hat=None if phi_hat is None else np.asarray(phi_hat, dtype=float),
    )


@dataclass(frozen=True, eq=False)
class OffGridDictionary:
    """Fixed azimuth grid plus the steering-matrix factory built on it.

    ``assemble(X, beta, phi_hat)`` returns ``A(beta, phi_hat)`` and
    ``Phi = X A``.  With ``phi_hat=None`` the linear-array steering vector is
    used; otherwise the planar one.
    """

    geom: ArrayGeometry
    wavelength: float
    grid: np.ndarray
    r_theta: float

    @classmethod
    def uniform(cls, geom: ArrayGeometry, wavelength: float, n_grid: int,
                domain: tuple[float, float] = (-np.pi / 2, np.pi / 2)) -> "OffGridDictionary":
        """``n_grid`` points spaced ``(hi - lo) / n_grid`` apart, centred in their cells."""
        if n_grid < 1:
            raise ValueError("grid needs at least one point")
        lo, hi = domain
        if not hi > lo:
            raise ValueError(f"grid domain must satisfy lo < hi, got {domain}")
        r = (hi - lo) / n_grid
        grid = lo + (np.arange(n_grid) + 0.5) * r
        return cls(geom=geom, wavelength=float(wavelength), grid=grid, r_theta=r)

    @classmethod
    def spatial_frequency(cls, geom: ArrayGeometry, wavelength: float, n_grid: int,
                          spacing: float) -> "OffGridDictionary":
        """Grid uniform in ``(spacing/lambda) sin(theta)`` over ``[-1/2, 1/2)``.

        For a ULA with ``n_grid == N`` the steering matrix equals
        ``sqrt(N) * dft_basis(N)``.
        """
        ratio = spacing / wavelength
        x = -0.5 + np.arange(n_grid) / n_grid
        s = x / ratio
        if np.any(np.abs(s) > 1):
            raise ValueError("spacing/wavelength < 1/2: DFT bins fall outside visible region")
        grid = np.arcsin(s)
        return cls(geom=geom, wavelength=float(wavelength), grid=grid, r_theta=np.pi / n_grid)

    @property
    def n_grid(self) -> int:
        return self.grid.size

    def offset_limits(self, clip: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper offset bounds: ``clip`` times the gap to each neighbour.

        With ``clip=0.5`` every refined angle stays in the cell of its own
        grid point, so neighbouring columns never cross.  On a uniform grid
        this is ``+-clip * r_theta``; the end points reuse the adjacent gap.
        """
        g = self.grid
        if g.size < 2:
            lim = np.full(g.size, clip * self.r_theta)
            return -lim, lim
        gaps = np.diff(g)
        return -clip * np.concatenate([gaps[:1], gaps]), clip * np.concatenate([gaps, gaps[-1:]])

    def with_wavelength(self, wavelength: float) -> "OffGridDictionary":
        return replace(self, wavelength=float(wavelength))

    def angles(self, beta=None) -> np.ndarray:
        return self.grid if beta is None else self.grid + beta

    def steering(self, beta=None, phi_hat=None) -> np.ndarray:
        theta = self.angles(beta)
        if phi_hat is None:
            return steering_linear(self.geom, theta, self.wavelength)
        return steering_2d(self.geom, theta, phi_hat, self.wavelength)

    def steering_at(self, idx, beta=None, phi_hat=None) -> np.ndarray:
        """Columns ``idx`` of :meth:`steering` without building the rest."""
        theta = self.angles(beta)[idx]
        if phi_hat is None:
            return steering_linear(self.geom, theta, self.wavelength)
        return steering_2d(self.geom, theta, np.asarray(phi_hat)[idx], self.wavelength)

    def deriv_theta(self, beta=None, phi_hat=None, steering=None) -> np.ndarray:
        """Azimuth derivative of every column; ``steering`` may pass in ``A`` to reuse it."""
        theta = self.angles(beta)
        if phi_hat is None:
            # linear array: phase x_n sin(theta) with signed positions x_n
            a = steering_linear(self.geom, theta, self.wavelength) if steering is None else steering
            pos = self.geom.d * np.cos(self.geom.phi)
            return (-2j * np.pi * pos / self.wavelength)[:, None] * np.cos(theta)[None, :] * a
        return steering_deriv_theta(self.geom, theta, phi_hat, self.wavelength)

    def deriv_phi(self, beta, phi_hat) -> np.ndarray:
        return steering_deriv_phi(self.geom, self.angles(beta), phi_hat, self.wavelength)

    def assemble(self, X, beta=None, phi_hat=None) -> tuple[np.ndarray, np.ndarray]:
        A = self.steering(beta, phi_hat)
        return A, mm(np.asarray(X), A)


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")


def _cholesky(M: np.ndarray) -> tuple[np.ndarray, bool]:
    n = M.shape[0]
    _ops.record("cholesky", n ** 3 // 3)
    try:
        return scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * float(np.max(np.abs(np.diag(M)).real))
    try:
        return scipy.linalg.cho_factor(M + jitter * np.eye(n), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError("posterior system is numerically singular even after jitter") from None


def _cho_solve(cho, B: np.ndarray) -> np.ndarray:
    n = cho[0].shape[0]
    k = B.shape[1] if B.ndim > 1 else 1
    _ops.record("trisolve", n * n * k)
    return scipy.linalg.cho_solve(cho, B, check_finite=False)


def _tri_solve(cho, B: np.ndarray) -> np.ndarray:
    n = cho[0].shape[0]
    _ops.record("trisolve", n * n * B.shape[1] // 2)
    return scipy.linalg.solve_triangular(cho[0], B, lower=True, check_finite=False)


def compute_posterior(y: np.ndarray, Phi: np.ndarray, alpha: float, gamma: np.ndarray) -> Posterior:
    """Posterior mean and covariance of the sparse weights."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    gamma = np.asarray(gamma, dtype=float)
    if np.any(~(gamma > 0)):
        raise ValueError("gamma must be positive element-wise")
    _check_finite("y", y)
    _check_finite("Phi", Phi)
    _check_finite("alpha", alpha)
    _check_finite("gamma", gamma)
    T, L = Phi.shape
    if T < L:
        ginv = 1.0 / gamma
        PG = Phi * ginv[None, :]
        C = mm(PG, Phi.conj().T)
        C[np.diag_indices(T)] += 1.0 / alpha
        cho = _cholesky(C)
        # with C = R R^H: Sigma = G^-1 - V^H V and mu = V^H R^-1 y, V = R^-1 Phi G^-1
        V = _tri_solve(cho, np.column_stack([PG, y]))
        v = V[:, -1]
        V = V[:, :-1]
        sigma = -mm(V.conj().T, V)
        sigma[np.diag_indices(L)] += ginv
        mu = V.conj().T @ v
    else:
        M = alpha * mm(Phi.conj().T, Phi)
        M[np.diag_indices(L)] += gamma
        cho = _cholesky(M)
        sigma = _cho_solve(cho, np.eye(L, dtype=complex))
        mu = alpha * (sigma @ (Phi.conj().T @ y))
    sigma = 0.5 * (sigma + sigma.conj().T)
    _check_finite("posterior", sigma)
    return Posterior(mu=mu, sigma=sigma)


def residual_energy(y, Phi, mu, sigma) -> float:
    """``tr(Phi Sigma Phi^H) + ||y - Phi mu||^2``."""
    PS = mm(Phi, sigma)
    tr = float(np.sum(PS * Phi.conj()).real)
    r = y - Phi @ mu
    return tr + float(np.vdot(r, r).real)


def update_alpha(state: SblState, y: np.ndarray, Phi: np.ndarray, priors: Hyperpriors) -> float:
    """Closed-form noise-precision update ``(T + a) / (b + eta)``."""
    if state.mu.shape[0] != Phi.shape[1]:
        raise ValueError("posterior does not match the measurement matrix")
    eta = residual_energy(y, Phi, state.mu, state.sigma)
    if eta < -1e-12:
        raise NumericalError(f"negative residual energy eta = {eta}")
    return (Phi.shape[0] + priors.a) / (priors.b + max(eta, 0.0))


def second_moment_diag(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Diagonal of ``Sigma + mu mu^H``."""
    xi = np.diag(sigma).real + np.abs(mu) ** 2
    if np.any(xi < -1e-10):
        raise NumericalError("posterior second moment has a negative diagonal entry")
    return np.maximum(xi, 0.0)


def update_gamma(state: SblState, priors: Hyperpriors) -> np.ndarray:
    """Closed-form precision update ``(a + 1) / (b + [Sigma + mu mu^H]_ll)``."""
    xi = second_moment_diag(state.mu, state.sigma)
    return np.minimum((priors.a + 1.0) / (priors.b + xi), GAMMA_MAX)


def gamma_log_prior(x, priors: Hyperpriors):
    """Log-density of ``Gamma(x; 1 + a, rate=b)``, summed over ``x``."""
    x = np.asarray(x, dtype=float)
    k = 1.0 + priors.a
    vals = k * math.log(priors.b) - gammaln(k) + priors.a * np.log(x) - priors.b * x
    return float(np.sum(vals))


def gaussian_log_marginal(y: np.ndarray, Phi: np.ndarray, noise_precision: float,
                          prior_precision: np.ndarray) -> float:
    """``ln CN(y; 0, noise_precision^-1 I + Phi diag(prior_precision)^-1 Phi^H)``."""
    T = Phi.shape[0]
    C = mm(Phi * (1.0 / prior_precision)[None, :], Phi.conj().T)
    C[np.diag_indices(T)] += 1.0 / noise_precision
    C = 0.5 * (C + C.conj().T)
    try:
        chol = scipy.linalg.cholesky(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError("marginal covariance is not positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol).real)))
    z = scipy.linalg.solve_triangular(chol, y, lower=True, check_finite=False)
    return -T * math.log(math.pi) - logdet - float(np.vdot(z, z).real)


def log_evidence(y: np.ndarray, Phi: np.ndarray, alpha: float, gamma: np.ndarray,
                 priors: Hyperpriors) -> float:
    """``ln p(y | alpha, gamma) + ln p(alpha) + ln p(gamma)`` for fixed ``Phi``."""
    gamma = np.asarray(gamma, dtype=float)
    return (gaussian_log_marginal(y, Phi, alpha, gamma)
            + gamma_log_prior(alpha, priors) + gamma_log_prior(gamma, priors))


def select_support(power: np.ndarray, threshold: float, cap: int) -> np.ndarray:
    """Indices with ``power >= threshold * max(power)``, keeping at most ``cap`` strongest."""
    power = np.asarray(power, dtype=float)
    pmax = power.max() if power.size else 0.0
    if not pmax > 0:
        raise ValueError("no active components")
    idx = np.flatnonzero(power >= threshold * pmax)
    if idx.size > cap:
        keep = np.argsort(power[idx], kind="stable")[::-1][:cap]
        idx = idx[keep]
    return np.sort(idx)


def refit_on_support(A_sub: np.ndarray, X, y: np.ndarray) -> np.ndarray:
    """``A_sub (X A_sub)^+ y``."""
    Phi_sub = np.asarray(X) @ A_sub
    coef, *_ = np.linalg.lstsq(Phi_sub, y, rcond=None)
    return A_sub @ coef


def extract_channel(dictionary: OffGridDictionary, X, y: np.ndarray, state: SblState,
                    support_threshold: float = 1e-2,
                    power: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares channel estimate on the support picked from ``|mu|^2``.

    ``power`` overrides the per-component strengths used for the support
    decision.
    """
    X = np.asarray(X)
    weights = np.abs(state.mu) ** 2 if power is None else np.asarray(power, dtype=float)
    omega = select_support(weights, support_threshold, cap=X.shape[0])
    A_sub = dictionary.steering_at(omega, state.beta, state.phi_hat)
    return refit_on_support(A_sub, X, y), omega
