"""Maxwell subsystem on the periodic line: Faraday, Ampere with plasma current, Gauss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import N_B, ConfigError, SpatialGrid, spectral_dx


class CompatibilityError(ConfigError):
    """The torus admits no field with the requested divergence."""


@dataclass
class EMField:
    E: np.ndarray  # (n_x, 3)
    B: np.ndarray  # (n_x, 3)

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.E.shape != self.B.shape or self.E.shape[-1] != 3:
            raise ConfigError(f"E and B must both have shape (n_x, 3), got {self.E.shape}, {self.B.shape}")

    @classmethod
    def zeros(cls, n_x: int) -> "EMField":
        return cls(np.zeros((n_x, 3)), np.zeros((n_x, 3)))

    def copy(self) -> "EMField":
        return EMField(self.E.copy(), self.B.copy())

    def __add__(self, other: "EMField") -> "EMField":
        return EMField(self.E + other.E, self.B + other.B)

    def scaled(self, a: float) -> "EMField":
        return EMField(a * self.E, a * self.B)

    def energy(self, grid: SpatialGrid) -> float:
        return 0.5 * grid.dx * float(np.sum(self.E ** 2) + np.sum(self.B ** 2))


def curl_1d(A: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """Curl of a field depending on x only: (0, -dA_3/dx, dA_2/dx)."""
    d = spectral_dx(A[:, 1:], grid)
    out = np.zeros_like(A)
    out[:, 1] = -d[:, 1]
    out[:, 2] = d[:, 0]
    return out


def maxwell_rhs(f: EMField, current: np.ndarray, grid: SpatialGrid) -> EMField:
    """dE/dt = curl B + current, dB/dt = -curl E.

    ``current`` is the particle flux int v F dv (or rho u for the fluid).  With
    dF/dt containing +(E + v x B).grad_v F (electrons), this sign makes particle plus field energy conserved.
    """
    return EMField(curl_1d(f.B, grid) + np.asarray(current, dtype=float),
                   -curl_1d(f.E, grid))


def gauss_residual(f: EMField, rho: np.ndarray, grid: SpatialGrid):
    r_e = spectral_dx(f.E[:, 0], grid) - (N_B - np.asarray(rho, dtype=float))
    r_b = spectral_dx(f.B[:, 0], grid)
    return grid.norm(r_e), grid.norm(r_b)


def init_e_from_density(rho: np.ndarray, grid: SpatialGrid, tol: float = 1e-12) -> np.ndarray:
    """Zero-mean E with dE_1/dx = 1 - rho; E_2 = E_3 = 0."""
    src = N_B - np.asarray(rho, dtype=float)
    mean = float(np.mean(src))
    if abs(mean) > tol * max(1.0, float(np.max(np.abs(src)))):
        raise CompatibilityError(
            f"mean of (1 - rho) over the torus is {mean:.3e}; "
            "a periodic field cannot carry a net charge"
        )
    sh = np.fft.rfft(src)
    k = grid.wavenumbers
    eh = np.zeros_like(sh)
    eh[1:] = sh[1:] / (1j * k[1:])
    if grid.n_x % 2 == 0:
        eh[-1] = 0.0
    E = np.zeros((grid.n_x, 3))
    E[:, 0] = np.fft.irfft(eh, n=grid.n_x)
    return E


def rk4(rhs, y, dt):
    """One classical Runge-Kutta step for any state supporting + and scaled()."""
    k1 = rhs(y)
    k2 = rhs(y + k1.scaled(0.5 * dt))
    k3 = rhs(y + k2.scaled(0.5 * dt))
    k4 = rhs(y + k3.scaled(dt))
    return y + (k1 + k2.scaled(2.0) + k3.scaled(2.0) + k4).scaled(dt / 6.0)
