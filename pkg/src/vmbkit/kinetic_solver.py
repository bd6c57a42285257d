"""Time integration of the scaled Vlasov-Maxwell-Boltzmann system in 1D3V.

    dF/dt = -v_1 dF/dx + (E + v x B).grad_v F + Q(F, F) / eps
    dE/dt = curl B + int v F dv,    dB/dt = -curl E

The stiff collision term is handled by an implicit-explicit Runge-Kutta
scheme of type ARS(2,2,2) with BGK penalization: beta (M_d[F] - F) / eps is
taken implicitly (closed form, since it preserves the moments of F), the
remainder (Q(F,F) - beta (M_d[F] - F)) / eps explicitly together with
transport, force and the Maxwell update.  M_d is the exponential whose
discrete moments match those of F.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .collision import CollisionKernel
from .em_fields import EMField, gauss_residual, maxwell_rhs
from .grids import R_GAS, ConfigError, RunConfig, SpatialGrid, VelocityGrid, dealias, fd_dv, spectral_dx
from .maxwellian import DegenerateStateError, discrete_maxwellian, eval_maxwellian, invariants, moments_from_f

log = logging.getLogger(__name__)

GAMMA = 1.0 - 1.0 / math.sqrt(2.0)
DELTA = 1.0 - 1.0 / (2.0 * GAMMA)
BETA_SAFETY = 1.2


class CFLError(ConfigError):
    def __init__(self, dt, dt_max):
        super().__init__(f"time step {dt:.6e} violates the transport/light CFL bound; "
                         f"admissible dt <= {dt_max:.6e}")
        self.dt_max = dt_max


class NumericalAbort(RuntimeError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass
class KineticState:
    F: np.ndarray       # (n_x, n_v^3)
    em: EMField
    t: float = 0.0
    eps: float = 1.0

    def copy(self) -> "KineticState":
        return KineticState(self.F.copy(), self.em.copy(), self.t, self.eps)


@dataclass
class KineticModel:
    """Grids, kernel and physical parameters shared by all steps of a run."""

    vgrid: VelocityGrid
    sgrid: SpatialGrid
    kernel: CollisionKernel
    eps: float
    filter: bool = True
    cfl: float = 0.5

    def dt_max(self) -> float:
        return self.cfl * self.sgrid.dx / max(self.vgrid.l_v, 1.0)

    def current(self, F) -> np.ndarray:
        return self.vgrid.weight * F @ self.vgrid.nodes

    def density(self, F) -> np.ndarray:
        return self.vgrid.weight * F.sum(axis=-1)

    def transport(self, F) -> np.ndarray:
        return -self.vgrid.nodes[:, 0] * spectral_dx(F, self.sgrid)

    def force_fd(self, F, em: EMField) -> np.ndarray:
        """(E + v x B).grad_v F with fourth-order differences in v."""
        V = self.vgrid.nodes
        out = np.zeros_like(F)
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            # (E + v x B)_a = E_a + v_b B_c - v_c B_b
            acc = em.E[:, a:a + 1] + V[None, :, b] * em.B[:, c:c + 1] - V[None, :, c] * em.B[:, b:b + 1]
            out += acc * fd_dv(F, self.vgrid, a)
        return out

    def force(self, F, em: EMField) -> np.ndarray:
        """Force term with the local Maxwellian part differentiated exactly.

        grad_v M = -(v - u) M / (R theta), so only F - M goes through the
        finite differences; the Maxwellian part then stays in span{psi M}
        and feeds no spurious micro source.  A final correction in
        span{psi M} sets the five invariant moments to their exact values
        (mass 0, momentum -(rho E + J x B), energy -J.E).
        """
        g = self.vgrid
        m = moments_from_f(F, g)
        M = eval_maxwellian(m, g)
        V = g.nodes
        w = V[None] - m.u[:, None, :]
        acc = em.E[:, None, :] + np.cross(V[None], em.B[:, None, :])
        out = -np.sum(acc * w, axis=-1) * M / (R_GAS * m.theta)[:, None]
        out += self.force_fd(F - M, em)
        rho = self.density(F)
        J = self.current(F)
        target = np.concatenate([np.zeros((len(rho), 1)),
                                 -(rho[:, None] * em.E + np.cross(J, em.B)),
                                 -np.sum(J * em.E, axis=1)[:, None]], axis=1)
        return _match_moments(out, M, target, g)

    def collision(self, F) -> np.ndarray:
        return self.kernel.collide(F)

    def local_equilibrium(self, F) -> np.ndarray:
        return discrete_maxwellian(moments_from_f(F, self.vgrid), self.vgrid)

    def beta(self, F) -> float:
        return BETA_SAFETY * float(np.max(self.kernel.loss_frequency(F)))


def _match_moments(D, M, target, grid: VelocityGrid):
    """D + M (a . psi) with a chosen so the discrete invariant moments equal ``target``."""
    psi = invariants(grid)
    w = grid.weight
    have = w * np.einsum("ck,ik->ci", D, psi)
    gram = w * np.einsum("ck,ik,jk->cij", M, psi, psi)
    a = np.linalg.solve(gram, (target - have)[..., None])[..., 0]
    return D + M * np.einsum("ci,ik->ck", a, psi)


def vmb_rhs(s: KineticState, model: KineticModel):
    """Full explicit right-hand side (dF/dt, d(E,B)/dt)."""
    F = s.F
    dF = model.transport(F) + model.force(F, s.em) + model.collision(F) / model.eps
    return dF, maxwell_rhs(s.em, model.current(F), model.sgrid)


def _explicit(F, em, Md, beta, model: KineticModel):
    coll = (model.collision(F) - beta * (Md - F)) / model.eps
    dF = model.transport(F) + model.force(F, em) + coll
    return dF, maxwell_rhs(em, model.current(F), model.sgrid)


def _relax(X, a, model: KineticModel):
    Md = model.local_equilibrium(X)
    return (X + a * Md) / (1.0 + a), Md


def imex_step(s: KineticState, dt: float, model: KineticModel, check_cfl: bool = True,
              beta: float | None = None) -> KineticState:
    """One ARS(2,2,2) step with BGK penalization."""
    dtm = model.dt_max()
    if check_cfl and dt > dtm * (1 + 1e-12):
        raise CFLError(dt, dtm)
    eps = model.eps
    F0 = s.F
    b = model.beta(F0) if beta is None else beta
    a = GAMMA * dt * b / eps
    Md0 = model.local_equilibrium(F0)
    k1, m1 = _explicit(F0, s.em, Md0, b, model)
    X2 = F0 + GAMMA * dt * k1
    em2 = s.em + m1.scaled(GAMMA * dt)
    Y2, Md2 = _relax(X2, a, model)
    im2 = (Y2 - X2) / (GAMMA * dt)
    k2, m2 = _explicit(Y2, em2, Md2, b, model)
    X3 = F0 + dt * (DELTA * k1 + (1.0 - DELTA) * k2) + dt * (1.0 - GAMMA) * im2
    em3 = s.em + (m1.scaled(DELTA) + m2.scaled(1.0 - DELTA)).scaled(dt)
    F1, _ = _relax(X3, a, model)
    if model.filter:
        F1 = dealias(F1, model.sgrid)
        em3 = EMField(dealias(em3.E, model.sgrid), dealias(em3.B, model.sgrid))
    return KineticState(F1, em3, s.t + dt, s.eps)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    series: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    complete: bool = True
    message: str = ""
    fix_warned: bool = False


def total_mass(F, model: KineticModel) -> float:
    return model.sgrid.dx * float(np.sum(model.density(F)))


def total_energy(s: KineticState, model: KineticModel) -> float:
    g = model.vgrid
    kin = model.sgrid.dx * g.weight * float(np.sum(s.F @ (0.5 * g.speed2)))
    return kin + s.em.energy(model.sgrid)


def micro_norm(F, model: KineticModel) -> float:
    """L2_{x,v} norm of F minus its local Maxwellian."""
    M = eval_maxwellian(moments_from_f(F, model.vgrid), model.vgrid)
    return math.sqrt(model.sgrid.dx * model.vgrid.weight * float(np.sum((F - M) ** 2)))


def record(s: KineticState, model: KineticModel) -> dict:
    ge, gb = gauss_residual(s.em, model.density(s.F), model.sgrid)
    return {
        "t": s.t,
        "mass": total_mass(s.F, model),
        "energy": total_energy(s, model),
        "gauss_e": ge,
        "gauss_b": gb,
        "micro_norm": micro_norm(s.F, model),
        "min_f": float(s.F.min()),
        "max_f": float(s.F.max()),
        "moment_fix": model.kernel.max_fix,
    }


def step_schedule(t_end: float, every: float, dt_max: float, dt: float = 0.0):
    """Uniform step dividing both the snapshot interval and the horizon."""
    if every <= 0 or every > t_end:
        every = t_end
    n_snap = round(t_end / every)
    if abs(n_snap * every - t_end) > 1e-9 * t_end:
        raise ConfigError(f"t_end={t_end} is not a multiple of snapshot_every={every}")
    target = dt if dt > 0 else dt_max
    per = max(1, math.ceil(every / target - 1e-9))
    return every / per, per, n_snap


def run_kinetic(config: RunConfig, init: KineticState, model: KineticModel | None = None,
                kernel: CollisionKernel | None = None, observer=None) -> Trajectory:
    """Integrate to ``config.t_end`` storing snapshots every ``config.snapshot_every``."""
    if model is None:
        if kernel is None:
            kernel = CollisionKernel(config.vgrid, config.kernel_mode, config.line_order)
        model = KineticModel(config.vgrid, config.sgrid, kernel, config.eps, cfl=config.cfl)
    dt, per, n_snap = step_schedule(config.t_end, config.snapshot_every, model.dt_max(), config.dt)
    if dt > model.dt_max() * (1 + 1e-12):
        raise CFLError(dt, model.dt_max())
    traj = Trajectory()
    s = init.copy()
    s.eps = model.eps
    ref = {"F": float(np.max(np.abs(s.F))), "E": float(np.max(np.abs(s.em.E))) + 1.0,
           "B": float(np.max(np.abs(s.em.B))) + 1.0}

    def emit(state):
        traj.times.append(state.t)
        traj.states.append(state.copy())
        rec = record(state, model)
        traj.series.append(rec)
        if observer is not None:
            observer(state, rec)

    emit(s)
    for k in range(n_snap):
        for _ in range(per):
            b = model.beta(s.F)
            traj.beta.append(b)
            try:
                new = imex_step(s, dt, model, check_cfl=False, beta=b)
            except (DegenerateStateError, np.linalg.LinAlgError) as exc:
                traj.complete = False
                traj.message = (f"degenerate state at t={s.t + dt:.6e} ({exc}); "
                                f"last good snapshot t={traj.times[-1]:.6e}")
                raise NumericalAbort(traj.message, traj) from exc
            bad = (not np.all(np.isfinite(new.F)) or np.max(np.abs(new.F)) > 1e6 * ref["F"]
                   or np.max(np.abs(new.em.E)) > 1e6 * ref["E"]
                   or np.max(np.abs(new.em.B)) > 1e6 * ref["B"])
            if bad:
                traj.complete = False
                traj.message = f"blow-up detected at t={new.t:.6e}; last good snapshot t={traj.times[-1]:.6e}"
                raise NumericalAbort(traj.message, traj)
            s = new
        s.t = (k + 1) * config.snapshot_every if config.snapshot_every <= config.t_end else config.t_end
        emit(s)
        if model.kernel.max_fix > config.tol.fix and not traj.fix_warned:
            traj.fix_warned = True
            log.warning("collision moment fix reached %.2e > tol_fix=%.1e at t=%.4f; "
                        "consider a larger n_v", model.kernel.max_fix, config.tol.fix, s.t)
    log.info("run finished: eps=%g dt=%.3e steps=%d beta max=%.3e moment fix max=%.2e",
             model.eps, dt, per * n_snap, max(traj.beta) if traj.beta else 0.0, model.kernel.max_fix)
    return traj


def homogeneous_relax(F0, eps: float, dt: float, n_steps: int, kernel: CollisionKernel,
                      beta: float | None = None, sample=None):
    """Space-homogeneous relaxation with the same IMEX scheme (no transport, no fields)."""
    g = kernel.grid
    sg = SpatialGrid(1, 1.0)
    model = KineticModel(g, sg, kernel, eps, filter=False)
    s = KineticState(np.atleast_2d(np.asarray(F0, dtype=float)), EMField.zeros(1), 0.0, eps)
    states = [s.F[0].copy()]
    for i in range(n_steps):
        s = imex_step(s, dt, model, check_cfl=False, beta=beta)
        states.append(s.F[0].copy())
        if sample is not None:
            sample(i + 1, s.F[0])
    return np.array(states)


def invariant_moments(F, grid: VelocityGrid) -> np.ndarray:
    return grid.weight * np.einsum("...k,ik->...i", F, invariants(grid))
