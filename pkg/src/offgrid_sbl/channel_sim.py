"""Synthetic clustered channels, pilots, observation models and the NMSE metric.

Every generator takes a ``seed`` that is forwarded to
:func:`numpy.random.default_rng`, so an int, a ``SeedSequence`` or an
existing ``Generator`` all work.  The same seed always reproduces the same
draw bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .array_model import ArrayGeometry, steering_2d

__all__ = [
    "ClusterChannelConfig",
    "ChannelRealization",
    "PilotMatrix",
    "UplinkObservation",
    "generate_channel",
    "uplink_realization",
    "generate_pilots",
    "orthogonal_pilots",
    "observe_downlink",
    "observe_uplink",
    "ls_uplink_estimate",
    "noise_variance",
    "nmse",
    "nmse_mean",
]


def _crandn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circular complex Gaussian samples with variance ``var``."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class ClusterChannelConfig:
    """Statistics of the geometric cluster model.

    ``gain_variance=None`` means ``1 / (n_clusters * n_subpaths)`` so that
    ``E ||h||^2 = N`` whatever the path count.
    """

    n_clusters: int = 3
    n_subpaths: int = 10
    azimuth_range: tuple[float, float] = (-np.deg2rad(40.0), np.deg2rad(40.0))
    angular_spread: float = np.deg2rad(20.0)
    elevation_range: tuple[float, float] = (0.0, 0.0)
    elevation_spread: float = 0.0
    gain_variance: float | None = None

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_subpaths < 1:
            raise ValueError("n_clusters and n_subpaths must be >= 1")
        if self.angular_spread < 0 or self.elevation_spread < 0:
            raise ValueError("angular spreads must be non-negative")
        for name in ("azimuth_range", "elevation_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got ({lo}, {hi})")
        if self.gain_variance is not None and self.gain_variance <= 0:
            raise ValueError("gain_variance must be positive")

    @property
    def n_paths(self) -> int:
        return self.n_clusters * self.n_subpaths

    @property
    def path_gain_variance(self) -> float:
        return 1.0 / self.n_paths if self.gain_variance is None else self.gain_variance


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Path list ``(xi, theta, phi)`` and the channel it sums to."""

    xi: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    h: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.xi.size

    @property
    def paths(self) -> list[tuple[complex, float, float]]:
        return list(zip(self.xi.tolist(), self.theta.tolist(), self.phi.tolist()))

    def reassemble(self, geom: ArrayGeometry, wavelength: float) -> np.ndarray:
        return steering_2d(geom, self.theta, self.phi, wavelength) @ self.xi


def _path_channel(geom, wavelength, xi, theta, phi) -> ChannelRealization:
    h = steering_2d(geom, theta, phi, wavelength) @ xi
    return ChannelRealization(xi=xi, theta=theta, phi=phi, h=h)


def generate_channel(cfg: ClusterChannelConfig, geom: ArrayGeometry, wavelength: float,
                     seed=None) -> ChannelRealization:
    """Draw one clustered channel realization.

    Cluster centres are uniform over ``azimuth_range`` (and
    ``elevation_range``); sub-paths are uniform within half the spread on
    either side of their centre; gains are i.i.d. circular Gaussian.
    """
    rng = np.random.default_rng(seed)
    nc, ns = cfg.n_clusters, cfg.n_subpaths
    az_c = rng.uniform(*cfg.azimuth_range, size=nc)
    el_c = rng.uniform(*cfg.elevation_range, size=nc)
    half = cfg.angular_spread / 2.0
    theta = (az_c[:, None] + rng.uniform(-half, half, size=(nc, ns))).ravel()
    ehalf = cfg.elevation_spread / 2.0
    phi = (el_c[:, None] + rng.uniform(-ehalf, ehalf, size=(nc, ns))).ravel()
    phi = np.clip(phi, -np.pi / 2, np.pi / 2)
    xi = _crandn(rng, nc * ns, cfg.path_gain_variance)
    return _path_channel(geom, wavelength, xi, theta, phi)


def uplink_realization(downlink: ChannelRealization, geom: ArrayGeometry, wavelength: float,
                       seed=None, angle_perturbation: float = 0.0,
                       gain_variance: float | None = None) -> ChannelRealization:
    """Uplink channel sharing the downlink path angles with fresh gains.

    ``angle_perturbation`` adds uniform jitter of that half-width to each
    azimuth, for stress-testing the reciprocity assumption.
    """
    rng = np.random.default_rng(seed)
    L = downlink.n_paths
    var = 1.0 / L if gain_variance is None else gain_variance
    xi = _crandn(rng, L, var)
    theta = downlink.theta
    if angle_perturbation > 0:
        theta = theta + rng.uniform(-angle_perturbation, angle_perturbation, size=L)
    return _path_channel(geom, wavelength, xi, theta.copy(), downlink.phi.copy())


@dataclass(frozen=True, eq=False)
class PilotMatrix:
    X: np.ndarray
    power: float

    @property
    def shape(self):
        return self.X.shape

    def __array__(self, dtype=None, copy=None):
        return self.X if dtype is None else self.X.astype(dtype)


def _as_matrix(X) -> np.ndarray:
    return X.X if isinstance(X, PilotMatrix) else np.asarray(X)


def generate_pilots(T: int, N: int, P: float = 1.0, seed=None) -> PilotMatrix:
    """Random Gaussian pilots rescaled so that ``tr(X X^H) = P T N``."""
    if T < 1 or N < 1:
        raise ValueError(f"pilot dimensions must be >= 1, got T={T}, N={N}")
    if P <= 0:
        raise ValueError("pilot power must be positive")
    rng = np.random.default_rng(seed)
    X = _crandn(rng, (T, N))
    X *= np.sqrt(P * T * N) / np.linalg.norm(X)
    return PilotMatrix(X=X, power=float(P))


def orthogonal_pilots(K: int, T_bar: int, P: float = 1.0) -> np.ndarray:
    """``K`` mutually orthogonal rows of a ``T_bar``-point DFT, unit-modulus times sqrt(P)."""
    if T_bar < K:
        raise ValueError(f"need T_bar >= K for orthogonal pilots, got T_bar={T_bar}, K={K}")
    t = np.arange(T_bar)
    k = np.arange(K)[:, None]
    return np.sqrt(P) * np.exp(-2j * np.pi * k * t / T_bar)


def observe_downlink(X, h: np.ndarray, noise_var: float, seed=None) -> np.ndarray:
    """``y = X h + n`` with ``n ~ CN(0, noise_var I)``."""
    X = _as_matrix(X)
    y = X @ h
    if noise_var > 0:
        y = y + _crandn(np.random.default_rng(seed), y.shape, noise_var)
    return y


@dataclass(frozen=True, eq=False)
class UplinkObservation:
    Y_bar: np.ndarray
    S: np.ndarray
    noise_var: float

    def __post_init__(self):
        K, T_bar = self.S.shape
        if T_bar < K:
            raise ValueError(f"uplink needs T_bar >= K, got T_bar={T_bar}, K={K}")
        if self.Y_bar.shape[1] != T_bar:
            raise ValueError("Y_bar and S disagree on the number of pilot slots")


def observe_uplink(H_bar: np.ndarray, S: np.ndarray, noise_var: float, seed=None) -> UplinkObservation:
    """``Y_bar = H_bar S + N_bar`` for ``H_bar`` of shape (N, K)."""
    H_bar = np.atleast_2d(np.asarray(H_bar))
    if H_bar.shape[0] == 1 and S.shape[0] != 1:
        H_bar = H_bar.T
    S = np.atleast_2d(np.asarray(S))
    Y = H_bar @ S
    if noise_var > 0:
        Y = Y + _crandn(np.random.default_rng(seed), Y.shape, noise_var)
    return UplinkObservation(Y_bar=Y, S=S, noise_var=float(noise_var))


def ls_uplink_estimate(obs: UplinkObservation) -> np.ndarray:
    """Least-squares uplink channels ``Y_bar S^+``, shape (N, K)."""
    S = obs.S
    K = S.shape[0]
    sv = np.linalg.svd(S, compute_uv=False)
    tol = sv.max() * max(S.shape) * np.finfo(float).eps if sv.size else 0.0
    rank = int(np.sum(sv > tol))
    if rank < K:
        raise np.linalg.LinAlgError(
            f"uplink pilot matrix S is rank deficient: rank {rank} < K = {K} users")
    # S^+ = S^H (S S^H)^{-1} for full row rank
    G = S @ S.conj().T
    return scipy.linalg.solve(G, S @ obs.Y_bar.conj().T, assume_a="her").conj().T


def noise_variance(snr_db: float, power: float = 1.0) -> float:
    """Noise variance giving training SNR ``P / sigma^2`` of ``snr_db``."""
    return power / 10.0 ** (snr_db / 10.0)


def nmse(h_est: np.ndarray, h_true: np.ndarray) -> float:
    denom = float(np.vdot(h_true, h_true).real)
    if denom == 0.0:
        raise ValueError("NMSE undefined for an all-zero true channel")
    err = np.asarray(h_est) - np.asarray(h_true)
    return float(np.vdot(err, err).real) / denom


def nmse_mean(values: Sequence[float]) -> float:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise ValueError("no NMSE values to average")
    return float(values.mean())
