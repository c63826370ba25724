"""Planar array geometry, steering vectors and the DFT leakage diagnostic.

Sensor positions are stored in polar form ``(d_n, phi_n)`` relative to the
first element, which sits at the origin.  The steering vector of a plane
wave with azimuth ``theta`` and elevation ``phi`` is::

    a_n(theta, phi) = exp(-j 2 pi (d_n / lambda) cos(phi) sin(theta - phi_n))

All angles are radians.  Functions accept scalar or 1-D angle arguments;
array arguments produce one column per angle (shape ``(N, K)``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ArrayGeometry",
    "steering_2d",
    "steering_linear",
    "steering_deriv_theta",
    "steering_deriv_phi",
    "dft_basis",
    "overcomplete_dft_matrix",
    "leakage_coefficient",
    "GeometryError",
]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Sensor coordinates of a planar array.

    Parameters
    ----------
    d : array_like, shape (N,)
        Radial distance of each sensor from the first one, in meters.
    phi : array_like, shape (N,)
        Angular coordinate of each sensor, in radians.
    """

    d: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        phi = np.asarray(self.phi, dtype=float).ravel()
        if d.shape != phi.shape:
            raise GeometryError("d and phi must have the same length")
        if d.size < 2:
            raise GeometryError(f"an array needs at least 2 sensors, got {d.size}")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(phi))):
            raise GeometryError("sensor coordinates must be finite")
        if d[0] != 0.0:
            raise GeometryError(f"first sensor must sit at the origin (d_1 = 0), got d_1 = {d[0]}")
        if np.any(d < 0):
            raise GeometryError("radial distances must be non-negative")
        d.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "phi", phi)

    @property
    def n_sensors(self) -> int:
        return self.d.size

    def __len__(self) -> int:
        return self.d.size

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return np.array_equal(self.d, other.d) and np.array_equal(self.phi, other.phi)

    __hash__ = None

    @property
    def xy(self) -> np.ndarray:
        """Cartesian sensor positions, shape (N, 2)."""
        return np.column_stack([self.d * np.cos(self.phi), self.d * np.sin(self.phi)])

    @classmethod
    def ula(cls, n: int, spacing: float) -> "ArrayGeometry":
        """Uniform linear array of ``n`` sensors along the ``phi_n = 0`` ray."""
        if n < 2:
            raise GeometryError(f"a ULA needs at least 2 sensors, got {n}")
        return cls(d=np.arange(n) * float(spacing), phi=np.zeros(n))

    @classmethod
    def from_xy(cls, xy) -> "ArrayGeometry":
        xy = np.asarray(xy, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise GeometryError("expected an (N, 2) array of sensor positions")
        rel = xy - xy[0]
        d = np.hypot(rel[:, 0], rel[:, 1])
        phi = np.arctan2(rel[:, 1], rel[:, 0])
        phi[d == 0] = 0.0
        return cls(d=d, phi=phi)

    @classmethod
    def planar(cls, nx: int, ny: int, dx: float, dy: float | None = None) -> "ArrayGeometry":
        """Rectangular ``nx`` by ``ny`` grid with the first sensor at a corner."""
        dy = dx if dy is None else dy
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
        xy = np.column_stack([ix.ravel() * dx, iy.ravel() * dy])
        return cls.from_xy(xy)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ArrayGeometry":
        """Read ``d_n phi_n`` pairs, one sensor per line; line 1 must be ``0 0``."""
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                parts = text.split()
                if len(parts) != 2:
                    raise GeometryError(f"{path}:{lineno}: expected 'd_n phi_n', got {line.rstrip()!r}")
                try:
                    rows.append((float(parts[0]), float(parts[1])))
                except ValueError as exc:
                    raise GeometryError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise GeometryError(f"{path}: no sensors")
        if rows[0] != (0.0, 0.0):
            raise GeometryError(f"{path}:1: first sensor must be '0 0'")
        arr = np.array(rows)
        return cls(d=arr[:, 0], phi=arr[:, 1])

    def to_file(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for dn, pn in zip(self.d, self.phi):
                fh.write(f"{float(dn)!r} {float(pn)!r}\n")


def _phase_args(geom: ArrayGeometry, theta, phi, wavelength: float):
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    scalar = theta.ndim == 0 and phi.ndim == 0
    theta, phi = np.broadcast_arrays(np.atleast_1d(theta), np.atleast_1d(phi))
    k = 2.0 * np.pi * geom.d[:, None] / wavelength
    diff = theta[None, :] - geom.phi[:, None]
    return k, diff, np.cos(phi)[None, :], np.sin(phi)[None, :], scalar


def _squeeze(out: np.ndarray, scalar: bool) -> np.ndarray:
    return out[:, 0] if scalar else out


def steering_2d(geom: ArrayGeometry, theta, phi, wavelength: float) -> np.ndarray:
    """Steering vector(s) for azimuth ``theta`` and elevation ``phi``."""
    k, diff, cphi, _, scalar = _phase_args(geom, theta, phi, wavelength)
    return _squeeze(np.exp(-1j * k * cphi * np.sin(diff)), scalar)


def steering_linear(geom: ArrayGeometry, theta, wavelength: float) -> np.ndarray:
    """Steering vector(s) of a linear array, ``exp(-j 2 pi (x_n / lambda) sin(theta))``.

    ``x_n = d_n cos(phi_n)`` is the signed position along the array axis,
    so this coincides with :func:`steering_2d` at zero elevation for sensors
    lying on the ``phi_n = 0`` line.
    """
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    theta = np.asarray(theta, dtype=float)
    scalar = theta.ndim == 0
    pos = geom.d * np.cos(geom.phi)
    out = np.exp(-2j * np.pi * (pos[:, None] / wavelength) * np.sin(np.atleast_1d(theta))[None, :])
    return _squeeze(out, scalar)


def steering_deriv_theta(geom: ArrayGeometry, theta, phi, wavelength: float) -> np.ndarray:
    """Derivative of :func:`steering_2d` with respect to azimuth."""
    k, diff, cphi, _, scalar = _phase_args(geom, theta, phi, wavelength)
    a = np.exp(-1j * k * cphi * np.sin(diff))
    return _squeeze(-1j * k * cphi * np.cos(diff) * a, scalar)


def steering_deriv_phi(geom: ArrayGeometry, theta, phi, wavelength: float) -> np.ndarray:
    """Derivative of :func:`steering_2d` with respect to elevation."""
    k, diff, cphi, sphi, scalar = _phase_args(geom, theta, phi, wavelength)
    sd = np.sin(diff)
    a = np.exp(-1j * k * cphi * sd)
    return _squeeze(1j * k * sphi * sd * a, scalar)


def dft_basis(n: int) -> np.ndarray:
    """Unitary DFT matrix whose column ``m`` is ``f(-1/2 + m/n)``.

    ``f(x) = n**-0.5 * [1, exp(-j 2 pi x), ..., exp(-j 2 pi x (n-1))]``.
    """
    if n < 1:
        raise ValueError(f"DFT size must be >= 1, got {n}")
    x = -0.5 + np.arange(n) / n
    i = np.arange(n)[:, None]
    return np.exp(-2j * np.pi * i * x[None, :]) / np.sqrt(n)


def overcomplete_dft_matrix(n: int, m: int) -> np.ndarray:
    """Unnormalized ``n`` by ``m`` overcomplete DFT dictionary.

    Column ``l`` is ``sqrt(n) * f(-1/2 + l/m)``; with ``m == n`` this is
    ``sqrt(n) * dft_basis(n)``.
    """
    if n < 1 or m < 1:
        raise ValueError("dimensions must be >= 1")
    x = -0.5 + np.arange(m) / m
    i = np.arange(n)[:, None]
    return np.exp(-2j * np.pi * i * x[None, :])


def leakage_coefficient(n, theta, N: int, d_over_lambda: float):
    """Magnitude of the ``n``-th DFT coefficient of a ULA steering vector.

    Closed form ``|sin(pi r N) / sin(pi r)| / sqrt(N)`` with
    ``r = (n-1)/N - 1/2 - (d/lambda) sin(theta)``; ``n`` is 1-based.
    Broadcasts over ``n`` and ``theta``.
    """
    n = np.asarray(n)
    if np.any(n < 1) or np.any(n > N):
        raise ValueError(f"bin index must lie in [1, {N}]")
    theta = np.asarray(theta, dtype=float)
    rho = (n - 1) / N - 0.5 - d_over_lambda * np.sin(theta)
    on_grid = np.abs(rho - np.round(rho)) < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.abs(np.sin(np.pi * rho * N) / np.sin(np.pi * rho)) / np.sqrt(N)
    out = np.where(on_grid, np.sqrt(N), val)
    return out[()] if out.ndim == 0 else out
