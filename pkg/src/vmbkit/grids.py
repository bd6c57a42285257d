"""Velocity and spatial grids, run configuration, quadrature and derivatives.

Velocity functions are stored as flat arrays whose last axis runs over the
``n_v**3`` nodes of the velocity box (C order over the three axes).  Spatial
fields carry the cell index on axis 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np

R_GAS = 2.0 / 3.0
N_B = 1.0


class ConfigError(ValueError):
    """Invalid run parameters or grid descriptors."""


class NonFiniteError(ValueError):
    """A grid function contains NaN or infinite values."""


@dataclass(frozen=True)
class Tolerances:
    quad: float = 1e-8
    micro: float = 1e-9
    gram: float = 1e-6
    solve: float = 1e-8
    fix: float = 1e-5
    gauss: float = 1e-10


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform cell-centred grid on the box [-l_v, l_v]^3."""

    n_v: int = 24
    l_v: float = 7.5

    def __post_init__(self):
        if self.n_v < 4 or self.n_v % 2:
            raise ConfigError(f"n_v must be an even integer >= 4, got {self.n_v}")
        if not self.l_v > 0:
            raise ConfigError(f"l_v must be positive, got {self.l_v}")

    @property
    def h(self) -> float:
        return 2.0 * self.l_v / self.n_v

    @property
    def weight(self) -> float:
        return self.h ** 3

    @property
    def size(self) -> int:
        return self.n_v ** 3

    @property
    def shape3(self) -> tuple:
        return (self.n_v, self.n_v, self.n_v)

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.l_v + (np.arange(self.n_v) + 0.5) * self.h

    @cached_property
    def nodes(self) -> np.ndarray:
        a = self.axis
        V = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        return V.reshape(-1, 3)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.einsum("ki,ki->k", self.nodes, self.nodes)

    @cached_property
    def mu(self) -> np.ndarray:
        """Global Maxwellian with unit density, zero mean and R*theta = 1."""
        return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * self.speed2)

    @cached_property
    def sqrt_mu(self) -> np.ndarray:
        return np.sqrt(self.mu)

    def integrate(self, g: np.ndarray) -> np.ndarray:
        return integrate_v(g, self)

    def quadrature_defect(self) -> float:
        """Largest error of the midpoint rule on mu * {1, v_i, |v|^2/2}."""
        mu = self.mu
        w = self.weight
        errs = [abs(w * mu.sum() - 1.0)]
        errs += [abs(w * (self.nodes[:, i] * mu).sum()) for i in range(3)]
        errs.append(abs(w * (0.5 * self.speed2 * mu).sum() - 1.5))
        return max(errs)

    def calibrate(self, tol_quad: float = 1e-8) -> float:
        d = self.quadrature_defect()
        if d > tol_quad:
            raise ConfigError(
                f"velocity grid (n_v={self.n_v}, l_v={self.l_v}) integrates the "
                f"global Maxwellian with error {d:.3e} > tol_quad={tol_quad:.1e}"
            )
        return d


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid in one space dimension."""

    n_x: int = 64
    l_x: float = 2.0 * math.pi
    d_x: int = 1

    def __post_init__(self):
        if self.n_x < 1 or self.n_x & (self.n_x - 1):
            raise ConfigError(f"n_x must be a power of two, got {self.n_x}")
        if not self.l_x > 0:
            raise ConfigError(f"l_x must be positive, got {self.l_x}")
        if self.d_x != 1:
            raise ConfigError("only one space dimension is supported")

    @property
    def dx(self) -> float:
        return self.l_x / self.n_x

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.rfftfreq(self.n_x, d=self.dx)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule mask on the rfft modes."""
        m = np.arange(self.n_x // 2 + 1)
        return m <= (self.n_x // 3)

    def norm(self, f: np.ndarray) -> float:
        """Discrete L2 norm over x (summing over any trailing axes)."""
        return math.sqrt(self.dx * float(np.sum(np.abs(f) ** 2)))


def integrate_v(g: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Midpoint quadrature over the velocity box along the last axis."""
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != grid.size:
        raise ConfigError(f"expected {grid.size} velocity nodes, got {g.shape[-1]}")
    bad = ~np.isfinite(g)
    if bad.any():
        flat = np.argwhere(bad)[0]
        node = int(flat[-1])
        raise NonFiniteError(
            f"non-finite value at index {tuple(int(i) for i in flat)} "
            f"(velocity node {node}, v={grid.nodes[node].tolist()})"
        )
    return grid.weight * g.sum(axis=-1)


def spectral_dx(f: np.ndarray, grid: SpatialGrid, order: int = 1) -> np.ndarray:
    """Fourier-collocation derivative along axis 0."""
    if order < 0:
        raise ConfigError("derivative order must be non-negative")
    if order > max(grid.n_x // 4, 1):
        raise ConfigError(
            f"derivative order {order} exceeds the resolution guard n_x/4 = {grid.n_x // 4}"
        )
    f = np.asarray(f, dtype=float)
    if order == 0:
        return f.copy()
    fh = np.fft.rfft(f, axis=0)
    mult = (1j * grid.wavenumbers) ** order
    if order % 2 and grid.n_x % 2 == 0:
        mult[-1] = 0.0
    fh *= mult.reshape((-1,) + (1,) * (f.ndim - 1))
    return np.fft.irfft(fh, n=grid.n_x, axis=0)


def dealias(f: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """Zero the upper third of the spatial spectrum (axis 0)."""
    fh = np.fft.rfft(f, axis=0)
    fh[~grid.dealias_mask] = 0.0
    return np.fft.irfft(fh, n=grid.n_x, axis=0)


_FD4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def fd_dv(g: np.ndarray, grid: VelocityGrid, axis: int) -> np.ndarray:
    """Fourth-order central difference along velocity axis 0, 1 or 2.

    Values outside the box are taken as zero.
    """
    if axis not in (0, 1, 2):
        raise ConfigError(f"velocity axis must be 0, 1 or 2, got {axis}")
    g = np.asarray(g, dtype=float)
    lead = g.shape[:-1]
    G = g.reshape(lead + grid.shape3)
    ax = len(lead) + axis
    pad = [(0, 0)] * G.ndim
    pad[ax] = (2, 2)
    P = np.pad(G, pad)
    n = grid.n_v
    out = np.zeros_like(G)
    for k, c in enumerate(_FD4):
        if c == 0.0:
            continue
        sl = [slice(None)] * G.ndim
        sl[ax] = slice(k, k + n)
        out += c * P[tuple(sl)]
    return (out / grid.h).reshape(g.shape)


def grad_v(g: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Stack of the three fd_dv derivatives, new axis in front."""
    return np.stack([fd_dv(g, grid, a) for a in range(3)])


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one kinetic/fluid run; keys double as config file keys."""

    eps: float = 0.1
    eta0: float = 1e-2
    a_exp: float = 0.0
    n_sobolev: int = 2
    dt: float = 0.0
    t_end: float = 0.5
    r_gas: float = R_GAS
    n_b: float = N_B
    n_v: int = 24
    l_v: float = 7.5
    n_x: int = 64
    l_x: float = 2.0 * math.pi
    b_const: float = 0.5
    snapshot_every: float = 0.05
    kernel_mode: str = "fast"
    line_order: int = 3
    cfl: float = 0.5
    fluid_dt: float = 0.0
    tol: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not 0.0 <= self.a_exp < 0.5:
            raise ConfigError(f"a_exp must lie in [0, 1/2), got {self.a_exp}")
        if abs(self.r_gas - R_GAS) > 1e-15:
            raise ConfigError("r_gas is fixed at 2/3")
        if self.n_b != N_B:
            raise ConfigError("n_b is fixed at 1")
        if self.n_sobolev < 1:
            raise ConfigError("n_sobolev must be >= 1")
        if self.dt < 0 or self.t_end <= 0:
            raise ConfigError("dt must be >= 0 (0 selects the CFL step) and t_end > 0")
        if self.kernel_mode not in ("fast", "direct"):
            raise ConfigError(f"kernel_mode must be 'fast' or 'direct', got {self.kernel_mode!r}")
        if self.eta0 < 0:
            raise ConfigError("eta0 must be non-negative")

    @property
    def vgrid(self) -> VelocityGrid:
        return VelocityGrid(self.n_v, self.l_v)

    @property
    def sgrid(self) -> SpatialGrid:
        return SpatialGrid(self.n_x, self.l_x)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls) if f.name != "tol"]
