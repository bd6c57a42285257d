"""Pseudo-spectral solver for the compressible Euler-Maxwell system on the periodic line.

Primitive variables (rho, u, theta) with pressure p = (2/3) rho theta:

    rho_t + (rho u_1)_x = 0
    u_t + u_1 u_x + p_x / rho e_1 = -(E + u x B)
    theta_t + u_1 theta_x + (2/3) theta (u_1)_x = 0
    E_t = curl B + rho u,   B_t = -curl E

An isentropic variant replaces the temperature equation by p = rho^(5/3).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .em_fields import EMField, curl_1d, gauss_residual, init_e_from_density
from .grids import ConfigError, RunConfig, SpatialGrid, dealias, spectral_dx
from .maxwellian import DegenerateStateError

GAMMA_ADIABATIC = 5.0 / 3.0


class ResolutionLossError(RuntimeError):
    pass


def theta_of_rho(rho_bar):
    rho_bar = np.asarray(rho_bar, dtype=float)
    if np.any(~(rho_bar > 0)):
        raise DegenerateStateError("density must be positive for the isentropic temperature")
    return 1.5 * rho_bar ** (2.0 / 3.0)


@dataclass
class FluidState:
    rho: np.ndarray          # (n_x,)
    u: np.ndarray            # (n_x, 3)
    theta: np.ndarray        # (n_x,)
    em: EMField
    t: float = 0.0

    def __add__(self, o: "FluidState") -> "FluidState":
        return FluidState(self.rho + o.rho, self.u + o.u, self.theta + o.theta, self.em + o.em, self.t)

    def scaled(self, a: float) -> "FluidState":
        return FluidState(a * self.rho, a * self.u, a * self.theta, self.em.scaled(a), self.t)

    def copy(self) -> "FluidState":
        return FluidState(self.rho.copy(), self.u.copy(), self.theta.copy(), self.em.copy(), self.t)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.u.ravel(), self.theta, self.em.E.ravel(), self.em.B.ravel()])


def _filtered(s: FluidState, grid: SpatialGrid) -> FluidState:
    return FluidState(dealias(s.rho, grid), dealias(s.u, grid), dealias(s.theta, grid),
                      EMField(dealias(s.em.E, grid), dealias(s.em.B, grid)), s.t)


def euler_maxwell_rhs(s: FluidState, grid: SpatialGrid, filtered: bool = True) -> FluidState:
    if np.any(~(s.rho > 0)):
        raise DegenerateStateError("nonpositive density in the fluid state")
    dx = lambda f: spectral_dx(f, grid)  # noqa: E731
    rho_t = -dx(s.rho * s.u[:, 0])
    p = (2.0 / 3.0) * s.rho * s.theta
    lorentz = s.em.E + np.cross(s.u, s.em.B)
    u_t = -s.u[:, 0:1] * dx(s.u) - lorentz
    u_t[:, 0] -= dx(p) / s.rho
    th_t = -s.u[:, 0] * dx(s.theta) - (2.0 / 3.0) * s.theta * dx(s.u[:, 0])
    em_t = EMField(curl_1d(s.em.B, grid) + s.rho[:, None] * s.u, -curl_1d(s.em.E, grid))
    out = FluidState(rho_t, u_t, th_t, em_t, s.t)
    return _filtered(out, grid) if filtered else out


def isentropic_rhs(s: FluidState, grid: SpatialGrid, filtered: bool = True) -> FluidState:
    """Same system with p = rho^(5/3); theta is carried along as (3/2) rho^(2/3) rate."""
    if np.any(~(s.rho > 0)):
        raise DegenerateStateError("nonpositive density in the fluid state")
    dx = lambda f: spectral_dx(f, grid)  # noqa: E731
    rho_t = -dx(s.rho * s.u[:, 0])
    lorentz = s.em.E + np.cross(s.u, s.em.B)
    u_t = -s.u[:, 0:1] * dx(s.u) - lorentz
    u_t[:, 0] -= dx(s.rho ** GAMMA_ADIABATIC) / s.rho
    th_t = s.rho ** (-1.0 / 3.0) * rho_t
    em_t = EMField(curl_1d(s.em.B, grid) + s.rho[:, None] * s.u, -curl_1d(s.em.E, grid))
    out = FluidState(rho_t, u_t, th_t, em_t, s.t)
    return _filtered(out, grid) if filtered else out


def rk4_step(s: FluidState, dt: float, grid: SpatialGrid, rhs=euler_maxwell_rhs) -> FluidState:
    k1 = rhs(s, grid)
    k2 = rhs(s + k1.scaled(0.5 * dt), grid)
    k3 = rhs(s + k2.scaled(0.5 * dt), grid)
    k4 = rhs(s + k3.scaled(dt), grid)
    out = s + (k1 + k2.scaled(2.0) + k3.scaled(2.0) + k4).scaled(dt / 6.0)
    out.t = s.t + dt
    return out


def tail_fraction(s: FluidState, grid: SpatialGrid) -> float:
    """Share of fluctuation energy in the upper half of the retained Fourier band."""
    cut = grid.n_x // 6
    hi = grid.dealias_mask.copy()
    hi[:cut + 1] = False
    tot = 0.0
    tail = 0.0
    for f in (s.rho, s.u, s.theta):
        fh = np.fft.rfft(f, axis=0)
        e = np.abs(fh) ** 2
        if e.ndim > 1:
            e = e.sum(axis=1)
        tot += e[1:].sum()
        tail += e[hi].sum()
    return float(tail / tot) if tot > 0 else 0.0


def default_dt(grid: SpatialGrid, cfl: float = 0.5) -> float:
    """RK4 step from the fastest signal speed (sound and light both O(1))."""
    return cfl * grid.dx


@dataclass
class FluidTrajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    series: list = field(default_factory=list)


def fluid_record(s: FluidState, grid: SpatialGrid) -> dict:
    ge, gb = gauss_residual(s.em, s.rho, grid)
    mom = grid.dx * np.sum(s.rho[:, None] * s.u, axis=0)
    energy = grid.dx * float(np.sum(s.rho * (s.theta + 0.5 * np.sum(s.u ** 2, axis=1)))) + s.em.energy(grid)
    return {
        "t": s.t,
        "mass": grid.dx * float(np.sum(s.rho)),
        "momentum_1": float(mom[0]),
        "energy": energy,
        "gauss_e": ge,
        "gauss_b": gb,
        "isentropic_defect": float(np.linalg.norm(s.theta - 1.5 * s.rho ** (2.0 / 3.0))
                                   / np.linalg.norm(s.theta)),
        "tail": tail_fraction(s, grid),
    }


def run_fluid(config: RunConfig, init: FluidState, dt: float | None = None,
              rhs=euler_maxwell_rhs, tail_limit: float = 1e-6, check_amplitude: bool = True) -> FluidTrajectory:
    grid = config.sgrid
    if check_amplitude:
        amp = max(float(np.max(np.abs(init.rho - np.mean(init.rho)))),
                  float(np.max(np.abs(init.u))))
        if amp > config.eta0 * (1 + 1e-9) + 1e-15:
            raise ConfigError(f"initial amplitude {amp:.3e} exceeds eta0={config.eta0:.3e}")
    every = config.snapshot_every if 0 < config.snapshot_every <= config.t_end else config.t_end
    n_snap = round(config.t_end / every)
    target = dt or config.fluid_dt or default_dt(grid)
    per = max(1, math.ceil(every / target - 1e-9))
    h = every / per
    traj = FluidTrajectory()
    s = init.copy()
    traj.times.append(s.t)
    traj.states.append(s.copy())
    traj.series.append(fluid_record(s, grid))
    for k in range(n_snap):
        for _ in range(per):
            s = rk4_step(s, h, grid, rhs)
        s.t = init.t + (k + 1) * every
        rec = fluid_record(s, grid)
        if rec["tail"] > tail_limit and traj.series[0]["tail"] <= tail_limit:
            raise ResolutionLossError(
                f"spectral tail share {rec['tail']:.2e} > {tail_limit:.0e} at t={s.t:.4f}; "
                "increase n_x or reduce eta0 / t_end")
        traj.times.append(s.t)
        traj.states.append(s.copy())
        traj.series.append(rec)
    return traj


def langmuir_state(grid: SpatialGrid, delta: float = 1e-4, mode: int = 1, b_const: float = 0.0) -> FluidState:
    x = grid.nodes
    k = 2 * math.pi * mode / grid.l_x
    rho = 1.0 + delta * np.cos(k * x)
    E = init_e_from_density(rho, grid)
    B = np.zeros((grid.n_x, 3))
    B[:, 0] = b_const
    return FluidState(rho, np.zeros((grid.n_x, 3)), theta_of_rho(rho), EMField(E, B))


def langmuir_frequency(grid: SpatialGrid, t_end: float = 40.0, dt: float = 0.02,
                       delta: float = 1e-4, mode: int = 1):
    """Measured dominant angular frequency of the density mode and the linear prediction."""
    s = langmuir_state(grid, delta, mode)
    n = int(round(t_end / dt))
    x = grid.nodes
    k = 2 * math.pi * mode / grid.l_x
    basis = np.cos(k * x)
    sig = np.empty(n + 1)
    sig[0] = np.dot(s.rho - 1.0, basis)
    for i in range(n):
        s = rk4_step(s, dt, grid)
        sig[i + 1] = np.dot(s.rho - 1.0, basis)
    sig = sig - sig.mean()
    win = np.hanning(len(sig))
    pad = 1 << (int(np.log2(len(sig))) + 6)
    power = np.abs(np.fft.rfft(sig * win, n=pad))
    freqs = 2 * np.pi * np.fft.rfftfreq(pad, d=dt)
    i = int(np.argmax(power[1:])) + 1
    # parabolic refinement of the peak
    a, b, c = power[i - 1], power[i], power[i + 1]
    off = 0.5 * (a - c) / (a - 2 * b + c)
    omega = freqs[i] + off * (freqs[1] - freqs[0])
    return float(omega), math.sqrt(1.0 + GAMMA_ADIABATIC * k * k)
