"""Perturbation variables, energy and dissipation functionals, limit errors and rate fits."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .burnett import correction_gbar
from .collision import CollisionKernel, lm_inverse
from .fluid_solver import FluidState
from .grids import SpatialGrid, VelocityGrid, fd_dv, spectral_dx
from .kinetic_solver import KineticModel, KineticState
from .maxwellian import FluidMoments, Projector, eval_maxwellian, invariants, moments_from_f

log = logging.getLogger(__name__)


class ConsistencyError(RuntimeError):
    pass


@dataclass
class PerturbationState:
    rho_t: np.ndarray
    u_t: np.ndarray
    theta_t: np.ndarray
    e_t: np.ndarray
    b_t: np.ndarray
    f: np.ndarray
    eps: float
    defect: float = 0.0

    def macro_fields(self):
        """Tilde variables as a list of (n_x,) or (n_x, 3) arrays."""
        return [self.rho_t, self.u_t, self.theta_t, self.e_t, self.b_t]


def _kernel_basis(vgrid: VelocityGrid) -> np.ndarray:
    """Orthonormal (midpoint inner product) basis of span{sqrt(mu) psi_i}."""
    B = invariants(vgrid) * vgrid.sqrt_mu
    q, _ = np.linalg.qr(B.T * math.sqrt(vgrid.weight))
    return q.T / math.sqrt(vgrid.weight)


def fluid_moments(flu: FluidState) -> FluidMoments:
    return FluidMoments(flu.rho, flu.u, flu.theta)


def perturbation_from(kin: KineticState, flu: FluidState, eps: float, kernel: CollisionKernel,
                      sgrid: SpatialGrid, tol_micro: float = 1e-9, gbar=None) -> PerturbationState:
    vg = kernel.grid
    m = moments_from_f(kin.F, vg)
    M = eval_maxwellian(m, vg)
    G = kin.F - M
    ref = fluid_moments(flu)
    if gbar is None:
        gbar = correction_gbar(m, ref, eps, kernel, sgrid).values
    f = (G - gbar) / vg.sqrt_mu
    basis = _kernel_basis(vg)
    coef = vg.weight * f @ basis.T
    f_fixed = f - coef @ basis
    scale = vg.weight * np.abs(kin.F) @ np.abs(invariants(vg)).T
    defect = float(np.max(np.abs(vg.weight * (f * vg.sqrt_mu) @ invariants(vg).T) / scale))
    if defect > 10 * tol_micro:
        raise ConsistencyError(f"micro defect of f is {defect:.3e} > {10 * tol_micro:.1e}")
    log.debug("perturbation micro defect %.3e", defect)
    return PerturbationState(m.rho - flu.rho, m.u - flu.u, m.theta - flu.theta,
                             kin.em.E - flu.em.E, kin.em.B - flu.em.B, f_fixed, eps, defect)


def velocity_multi_indices(order: int):
    return [b for b in itertools.product(range(order + 1), repeat=3) if sum(b) == order]


def _dv_multi(g, vgrid: VelocityGrid, beta):
    for axis, k in enumerate(beta):
        for _ in range(k):
            g = fd_dv(g, vgrid, axis)
    return g


@dataclass
class EnergyReport:
    e_n: float
    d_n: float
    e_terms: dict = field(default_factory=dict)
    d_terms: dict = field(default_factory=dict)
    limit_error_l2: float = float("nan")
    limit_error_linf_x: float = float("nan")


def energy_functionals(p: PerturbationState, n_order: int, sgrid: SpatialGrid, vgrid: VelocityGrid,
                       nu: np.ndarray | None = None) -> EnergyReport:
    """Instant energy and dissipation rate with x-derivatives of order alpha and
    velocity multi-indices beta; terms keyed by (alpha, |beta|, part)."""
    eps = p.eps
    dx, w = sgrid.dx, vgrid.weight
    if nu is None:
        nu = np.ones(vgrid.size)
    macro = p.macro_fields()
    hydro = macro[:3]
    e_terms, d_terms = {}, {}

    def sq(a):
        return dx * float(np.sum(a * a))

    def fsq(g, weight=None):
        return dx * w * float(np.sum(g * g if weight is None else weight * g * g))

    fder = {a: spectral_dx(p.f, sgrid, a) for a in range(n_order + 1)}
    for a in range(n_order + 1):
        mac = sum(sq(spectral_dx(q, sgrid, a)) for q in macro)
        hyd = sum(sq(spectral_dx(q, sgrid, a)) for q in hydro)
        ff = fsq(fder[a])
        fn = fsq(fder[a], nu)
        wgt = 1.0 if a <= n_order - 1 else eps ** 2
        e_terms[(a, 0, "macro")] = wgt * mac
        e_terms[(a, 0, "f")] = wgt * ff
        if a >= 1:
            d_terms[(a, 0, "macro")] = eps * hyd
        if a == n_order:
            d_terms[(a, 0, "f")] = eps * fn
        else:
            d_terms[(a, 0, "f")] = fn / eps
        for b in range(1, n_order - a + 1):
            es, ds = 0.0, 0.0
            for beta in velocity_multi_indices(b):
                g = _dv_multi(fder[a], vgrid, beta)
                es += fsq(g)
                ds += fsq(g, nu)
            e_terms[(a, b, "f")] = es
            d_terms[(a, b, "f")] = ds / eps
    return EnergyReport(sum(e_terms.values()), sum(d_terms.values()), e_terms, d_terms)


@dataclass
class LimitError:
    l2: float
    linf_x: float
    field_l2: float
    field_linf: float


def limit_error(kin: KineticState, flu: FluidState, vgrid: VelocityGrid, sgrid: SpatialGrid) -> LimitError:
    Mbar = eval_maxwellian(fluid_moments(flu), vgrid)
    d = (kin.F - Mbar) / vgrid.sqrt_mu
    per_cell = vgrid.weight * np.sum(d * d, axis=1)
    l2 = math.sqrt(sgrid.dx * float(np.sum(per_cell)))
    linf = math.sqrt(float(np.max(per_cell)))
    de = np.concatenate([kin.em.E - flu.em.E, kin.em.B - flu.em.B], axis=1)
    fl2 = math.sqrt(sgrid.dx * float(np.sum(de * de)))
    flinf = float(np.max(np.sqrt(np.sum(de * de, axis=1))))
    return LimitError(l2, linf, fl2, flinf)


@dataclass
class ThetaCheck:
    residual: float
    theta_defect: float
    flagged: bool


def theta_residual_check(window, model: KineticModel, tol: float = 1e-8,
                         defect_tol: float = 1e-6) -> ThetaCheck:
    """Residual of G = eps L^{-1}[P1(v_1 dM/dx)] + L^{-1} P1 Theta at the middle snapshot.

    ``window`` holds three equally spaced KineticState snapshots.
    """
    s0, s1, s2 = window
    h0, h1 = s1.t - s0.t, s2.t - s1.t
    if abs(h0 - h1) > 1e-9 * max(h0, h1):
        raise ValueError("snapshots must be equally spaced")
    eps = model.eps
    vg, sg, kernel = model.vgrid, model.sgrid, model.kernel
    Gs = []
    for s in (s0, s1, s2):
        m = moments_from_f(s.F, vg)
        Gs.append(s.F - eval_maxwellian(m, vg))
    m1 = moments_from_f(s1.F, vg)
    proj = Projector(m1, vg)
    G = Gs[1]
    if np.linalg.norm(G) == 0:
        return ThetaCheck(0.0, 0.0, False)
    dGdt = (Gs[2] - Gs[0]) / (h0 + h1)
    vdxG = vg.nodes[:, 0] * spectral_dx(G, sg)
    theta = (eps * dGdt + eps * proj.p1(vdxG) - eps * model.force_fd(G, s1.em)
             - kernel.q(G, G))
    ptheta = proj.p1(theta)
    tdef = float(np.linalg.norm(theta - ptheta) / max(np.linalg.norm(theta), 1e-300))
    src = proj.p1(vg.nodes[:, 0] * spectral_dx(proj.M, sg))
    rhs = lm_inverse(np.concatenate([src, ptheta]), FluidMoments(
        np.tile(m1.rho, 2), np.tile(m1.u, (2, 1)), np.tile(m1.theta, 2)),
        kernel, tol=tol, projector=proj.replicated(2, interleave=False))
    n = G.shape[0]
    pred = eps * rhs[:n] + rhs[n:]
    res = float(np.linalg.norm(G - pred) / np.linalg.norm(G))
    return ThetaCheck(res, tdef, tdef > defect_tol)



@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float
    rejected: list = field(default_factory=list)


def fit_rate(pairs) -> RateFit:
    """Least-squares line through (log eps, log error); nonpositive errors are rejected."""
    good, rejected = [], []
    for e, err in pairs:
        if e > 0 and err > 0 and math.isfinite(err):
            good.append((e, err))
        else:
            rejected.append((e, err))
    if len(good) < 3:
        raise ValueError(f"need at least 3 valid (eps, error) pairs, got {len(good)}; rejected {rejected}")
    x = np.log([g[0] for g in good])
    y = np.log([g[1] for g in good])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(icpt), r2, rejected)


def t_max_reference(eps: float, eta0: float, a: float, c1: float = 1.0) -> float:
    """Reference horizon 1 / (4 C1 (eta0 eps^a + eps^(1/2 - a))) with C1 = 1."""
    return 1.0 / (4.0 * c1 * (eta0 * eps ** a + eps ** (0.5 - a)))
