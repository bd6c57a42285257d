"""Fluid moments, local Maxwellians and the macro/micro projections.

All functions broadcast over leading axes: a velocity function has shape
``(..., n)`` with ``n = n_v**3`` and the matching moments have ``rho`` of shape
``(...)`` and ``u`` of shape ``(..., 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import R_GAS, ConfigError, VelocityGrid, integrate_v


class DegenerateStateError(ValueError):
    """Nonpositive density or temperature in some cell."""

    def __init__(self, msg, cell=None):
        super().__init__(msg)
        self.cell = cell


class QuadratureCalibrationError(ValueError):
    """The velocity grid cannot represent the invariants to tolerance."""


def _first_bad(mask):
    idx = np.argwhere(np.atleast_1d(mask))
    return tuple(int(i) for i in idx[0]) if len(idx) else None


@dataclass(frozen=True)
class FluidMoments:
    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if u.shape[-1:] != (3,):
            raise ConfigError(f"bulk velocity needs 3 components, got shape {u.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "u", u)
        bad = ~(np.isfinite(rho) & (rho > 0))
        if bad.any():
            c = _first_bad(bad)
            raise DegenerateStateError(f"density not in (0, inf) at cell {c}", c)
        bad = ~(np.isfinite(theta) & (theta > 0))
        if bad.any():
            c = _first_bad(bad)
            raise DegenerateStateError(f"temperature <= 0 at cell {c}", c)

    @classmethod
    def constant(cls, rho=1.0, u=(0.0, 0.0, 0.0), theta=1.5):
        return cls(np.asarray(rho, float), np.asarray(u, float), np.asarray(theta, float))

    @property
    def shape(self):
        return np.broadcast_shapes(self.rho.shape, self.theta.shape, self.u.shape[:-1])

    def cell(self, j) -> "FluidMoments":
        return FluidMoments(self.rho[j], self.u[j], self.theta[j])

    def allclose(self, other: "FluidMoments", tol: float) -> bool:
        return bool(
            np.allclose(self.rho, other.rho, rtol=0, atol=tol)
            and np.allclose(self.u, other.u, rtol=0, atol=tol)
            and np.allclose(self.theta, other.theta, rtol=0, atol=tol)
        )


@dataclass
class DistributionField:
    """Kinetic density on (cells, velocity nodes) tagged with its Knudsen number."""

    values: np.ndarray
    eps: float
    grid: VelocityGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        mass = integrate_v(self.values, self.grid)
        if np.any(mass <= 0):
            c = _first_bad(mass <= 0)
            raise DegenerateStateError(f"nonpositive cell mass at cell {c}", c)


@dataclass
class MicroFunction:
    """Velocity function orthogonal to the collision invariants.

    ``weight`` is either a local Maxwellian (micro with respect to its null
    space) or ``sqrt(mu)`` (micro with respect to the kernel of the
    linearized operator around the global Maxwellian).
    """

    values: np.ndarray
    weight: np.ndarray
    grid: VelocityGrid

    def defect(self) -> float:
        psi = invariants(self.grid)
        if np.allclose(self.weight, self.grid.sqrt_mu):
            tests = psi * self.grid.sqrt_mu
        else:
            tests = psi
        d = self.grid.weight * np.einsum("...k,ik->...i", self.values, tests)
        return float(np.max(np.abs(d)))

    def check(self, tol: float) -> "MicroFunction":
        d = self.defect()
        if d > tol:
            raise QuadratureCalibrationError(f"micro defect {d:.3e} exceeds {tol:.1e}")
        return self


def invariants(grid: VelocityGrid) -> np.ndarray:
    """Collision invariants 1, v_1, v_2, v_3, |v|^2/2 as rows of a (5, n) array."""
    V = grid.nodes
    return np.vstack([np.ones(grid.size), V.T, 0.5 * grid.speed2])


def moments_from_f(F, grid: VelocityGrid) -> FluidMoments:
    F = F.values if isinstance(F, DistributionField) else np.asarray(F, dtype=float)
    psi = invariants(grid)
    mom = grid.weight * np.einsum("...k,ik->...i", F, psi)
    rho = mom[..., 0]
    if np.any(~(rho > 0)):
        c = _first_bad(~(rho > 0))
        raise DegenerateStateError(f"density <= 0 at cell {c}", c)
    u = mom[..., 1:4] / rho[..., None]
    theta = mom[..., 4] / rho - 0.5 * np.sum(u * u, axis=-1)
    if np.any(~(theta > 0)):
        c = _first_bad(~(theta > 0))
        raise DegenerateStateError(f"temperature <= 0 at cell {c}", c)
    return FluidMoments(rho, u, theta)


def eval_maxwellian(m: FluidMoments, grid: VelocityGrid) -> np.ndarray:
    rt = R_GAS * m.theta[..., None]
    d = grid.nodes - m.u[..., None, :]
    q = np.sum(d * d, axis=-1)
    return m.rho[..., None] * (2.0 * np.pi * rt) ** -1.5 * np.exp(-q / (2.0 * rt))


def discrete_maxwellian(m: FluidMoments, grid: VelocityGrid, tol: float = 1e-13,
                        max_iter: int = 30) -> np.ndarray:
    """Exponential exp(a + b.v + c|v|^2) whose discrete moments equal ``m`` exactly.

    Newton iteration started from the continuous Maxwellian; used where
    conservation must hold to round-off on the truncated grid.
    """
    psi = invariants(grid)
    target = np.concatenate(
        [m.rho[..., None], (m.rho[..., None] * m.u),
         (m.rho * (m.theta + 0.5 * np.sum(m.u * m.u, axis=-1)))[..., None]], axis=-1)
    rt = R_GAS * m.theta
    coef = np.empty(target.shape)
    coef[..., 0] = np.log(m.rho * (2 * np.pi * rt) ** -1.5) - 0.5 * np.sum(m.u * m.u, -1) / rt
    coef[..., 1:4] = m.u / rt[..., None]
    coef[..., 4] = -1.0 / rt
    w = grid.weight
    scale = np.abs(target).max(axis=-1, keepdims=True) + 1.0
    for _ in range(max_iter):
        Mx = np.exp(np.einsum("...i,ik->...k", coef, psi))
        res = w * np.einsum("...k,ik->...i", Mx, psi) - target
        if np.max(np.abs(res) / scale) < tol:
            break
        J = w * np.einsum("...k,ik,jk->...ij", Mx, psi, psi)
        coef = coef - np.linalg.solve(J, res[..., None])[..., 0]
    return np.exp(np.einsum("...i,ik->...k", coef, psi))


def raw_basis(m: FluidMoments, grid: VelocityGrid):
    """The five macroscopic basis functions built directly from ``m``.

    Returns ``(chi, M)`` with ``chi`` of shape ``(..., 5, n)``.
    """
    M = eval_maxwellian(m, grid)
    s = np.sqrt(R_GAS * m.theta)[..., None, None]
    c = (grid.nodes - m.u[..., None, :]) / s
    base = M / np.sqrt(m.rho)[..., None]
    c2 = np.sum(c * c, axis=-1)
    chi = np.stack(
        [base, c[..., 0] * base, c[..., 1] * base, c[..., 2] * base,
         (c2 - 3.0) / np.sqrt(6.0) * base], axis=-2)
    return chi, M


def gram_matrix(chi: np.ndarray, M: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    return grid.weight * np.einsum("...ik,...jk->...ij", chi, chi / M[..., None, :])


def gram_defect(m: FluidMoments, grid: VelocityGrid) -> float:
    chi, M = raw_basis(m, grid)
    G = gram_matrix(chi, M, grid)
    return float(np.max(np.abs(G - np.eye(5))))


def macro_basis(m: FluidMoments, grid: VelocityGrid):
    """Basis of the macroscopic space, orthonormal in the 1/M inner product.

    A modified Gram-Schmidt pass removes the quadrature defect of the raw basis.
    """
    chi, M = raw_basis(m, grid)
    w = grid.weight
    out = np.empty_like(chi)
    for i in range(5):
        b = chi[..., i, :].copy()
        for j in range(i):
            q = out[..., j, :]
            b -= (w * np.sum(q * b / M, axis=-1))[..., None] * q
        b /= np.sqrt(w * np.sum(b * b / M, axis=-1))[..., None]
        out[..., i, :] = b
    return out, M


class Projector:
    """P0/P1 for a fixed field of moments, with the basis built once."""

    def __init__(self, m: FluidMoments, grid: VelocityGrid):
        self.grid = grid
        self.moments = m
        self.basis, self.M = macro_basis(m, grid)

    def coeffs(self, h):
        return self.grid.weight * np.einsum("...k,...ik->...i", h / self.M, self.basis)

    def p0(self, h):
        return np.einsum("...i,...ik->...k", self.coeffs(h), self.basis)

    def p1(self, h):
        return h - self.p0(h)

    def replicated(self, k: int, interleave: bool = True) -> "Projector":
        """Projector for a batch holding k copies of each cell.

        ``interleave`` repeats each cell k times in place (c0 c0 c1 c1 ...);
        otherwise the whole field is stacked k times (c0 c1 c0 c1 ...).
        """
        q = Projector.__new__(Projector)
        q.grid = self.grid
        q.moments = None
        if interleave:
            q.basis = np.repeat(self.basis, k, axis=0)
            q.M = np.repeat(self.M, k, axis=0)
        else:
            q.basis = np.tile(self.basis, (k, 1, 1))
            q.M = np.tile(self.M, (k, 1))
        return q


def project_p0(h, m: FluidMoments, grid: VelocityGrid) -> np.ndarray:
    return Projector(m, grid).p0(np.asarray(h, dtype=float))


def project_p1(h, m: FluidMoments, grid: VelocityGrid) -> np.ndarray:
    return Projector(m, grid).p1(np.asarray(h, dtype=float))


def micro_defect(G, grid: VelocityGrid, F=None) -> np.ndarray:
    """Relative invariant moments of ``G``: |<G, psi_i>| / <|F|, |psi_i|>."""
    psi = invariants(grid)
    num = np.abs(grid.weight * np.einsum("...k,ik->...i", G, psi))
    ref = np.abs(F if F is not None else G)
    den = grid.weight * np.einsum("...k,ik->...i", ref, np.abs(psi))
    return num / np.maximum(den, 1e-300)


def macro_micro_split(F, grid: VelocityGrid, tol_micro: float = 1e-9):
    """Split F into its local Maxwellian and the micro remainder."""
    Fv = F.values if isinstance(F, DistributionField) else np.asarray(F, dtype=float)
    m = moments_from_f(Fv, grid)
    M = eval_maxwellian(m, grid)
    G = Fv - M
    d = micro_defect(G, grid, Fv)
    if np.max(d) > tol_micro:
        c = _first_bad(d > tol_micro)
        raise QuadratureCalibrationError(
            f"micro defect {np.max(d):.3e} > tol_micro={tol_micro:.1e} at {c}; "
            "the velocity box does not resolve the local Maxwellian"
        )
    return M, MicroFunction(G, M, grid)


def maxwellian_field(rho, u, theta, grid: VelocityGrid) -> np.ndarray:
    return eval_maxwellian(FluidMoments(rho, u, theta), grid)


__all__ = [
    "ConfigError", "DegenerateStateError", "DistributionField", "FluidMoments",
    "MicroFunction", "Projector", "QuadratureCalibrationError", "discrete_maxwellian",
    "eval_maxwellian", "gram_defect", "invariants", "macro_basis", "macro_micro_split",
    "moments_from_f", "project_p0", "project_p1", "raw_basis",
]
