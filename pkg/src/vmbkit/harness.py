"""Run configuration files, snapshot persistence, well-prepared data and the eps sweep."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .em_fields import EMField, gauss_residual, init_e_from_density
from .grids import ConfigError, RunConfig, Tolerances
from .maxwellian import eval_maxwellian, FluidMoments

log = logging.getLogger(__name__)

SNAP_MAGIC = b"VMBSNAP\0"
SNAP_VERSION = 1
_HEAD = "<8sHBIIdddd"

# keys accepted in config files besides the RunConfig fields
EXTRA_KEYS = {"eps_list": str, "seed": int, "thetas": str, "spectrum_nv": int}


class CorruptSnapshotError(IOError):
    pass


class SnapshotVersionError(IOError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows) -> None:
    """CSV with all floats in full-precision scientific notation."""
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return "1" if v else "0"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17e}"
        return str(v)
    lines = [",".join(header)] + [",".join(fmt(v) for v in r) for r in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# -- config files -------------------------------------------------------------

def _convert(name, raw, typ):
    try:
        if typ is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config_text(text: str, source: str = "<config>"):
    """Parse ``key = value`` lines into (RunConfig, extras)."""
    run_types = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "tol"}
    tol_types = {f"tol_{f.name}": float for f in dataclasses.fields(Tolerances)}
    kw, tol_kw, extras = {}, {}, {}
    pytypes = {"float": float, "int": int, "str": str}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in run_types:
            kw[key] = _convert(key, val, pytypes.get(str(run_types[key]), float))
        elif key in tol_types:
            tol_kw[key[4:]] = _convert(key, val, float)
        elif key in EXTRA_KEYS:
            extras[key] = _convert(key, val, EXTRA_KEYS[key])
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    cfg = RunConfig(**kw, tol=Tolerances(**tol_kw))
    return cfg, extras


def load_config(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config_text(text, str(path))


def config_text(cfg: RunConfig, extras: dict | None = None) -> str:
    lines = [f"{k} = {getattr(cfg, k)}" for k in RunConfig.keys()]
    lines += [f"tol_{f.name} = {getattr(cfg.tol, f.name)!r}" for f in dataclasses.fields(Tolerances)]
    for k, v in (extras or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig, extras: dict | None = None) -> str:
    return hashlib.sha256(config_text(cfg, extras).encode()).hexdigest()[:16]


# -- snapshots ----------------------------------------------------------------

@dataclass
class Snapshot:
    kind: str              # "kinetic" or "fluid"
    n_x: int
    n_v: int
    l_x: float
    l_v: float
    t: float
    eps: float
    arrays: dict = field(default_factory=dict)


def save_snapshot(path, snap: Snapshot) -> None:
    kind = {"kinetic": 0, "fluid": 1}[snap.kind]
    desc, blobs = [], []
    for name, arr in snap.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        desc.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    djson = json.dumps(desc).encode()
    head = struct.pack(_HEAD, SNAP_MAGIC, SNAP_VERSION, kind, snap.n_x, snap.n_v, snap.l_x,
                       snap.l_v, snap.t, snap.eps)
    body = head + struct.pack("<I", len(djson)) + djson + b"".join(blobs)
    atomic_write(path, body + hashlib.sha256(body).digest())


def load_snapshot(path, expect: dict | None = None) -> Snapshot:
    raw = Path(path).read_bytes()
    hs = struct.calcsize(_HEAD)
    if len(raw) < hs + 4 + 32:
        raise CorruptSnapshotError(f"{path}: truncated snapshot")
    magic, ver = struct.unpack("<8sH", raw[:10])
    if magic != SNAP_MAGIC:
        raise CorruptSnapshotError(f"{path}: not a snapshot file")
    if ver != SNAP_VERSION:
        raise SnapshotVersionError(f"{path}: snapshot format version {ver}, this build reads {SNAP_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptSnapshotError(f"{path}: checksum mismatch (corrupt or truncated snapshot)")
    _, _, kind, n_x, n_v, l_x, l_v, t, eps = struct.unpack(_HEAD, raw[:hs])
    (dl,) = struct.unpack("<I", raw[hs:hs + 4])
    desc = json.loads(raw[hs + 4:hs + 4 + dl])
    off = hs + 4 + dl
    arrays = {}
    for d in desc:
        cnt = int(np.prod(d["shape"])) if d["shape"] else 1
        nbytes = 8 * cnt
        if off + nbytes > len(body):
            raise CorruptSnapshotError(f"{path}: payload shorter than header describes")
        arrays[d["name"]] = np.frombuffer(body[off:off + nbytes], dtype="<f8").reshape(d["shape"]).copy()
        off += nbytes
    if off != len(body):
        raise CorruptSnapshotError(f"{path}: payload size does not match header")
    snap = Snapshot("kinetic" if kind == 0 else "fluid", n_x, n_v, l_x, l_v, t, eps, arrays)
    if "F" in arrays and arrays["F"].shape != (n_x, n_v ** 3):
        raise CorruptSnapshotError(f"{path}: header grid does not match payload size")
    if expect:
        for k, v in expect.items():
            got = getattr(snap, k)
            if (isinstance(v, float) and abs(got - v) > 1e-12 * max(1.0, abs(v))) or (
                    not isinstance(v, float) and got != v):
                raise ConfigError(f"{path}: snapshot {k}={got} does not match requested {v}")
    return snap


def kinetic_snapshot(state, cfg: RunConfig) -> Snapshot:
    return Snapshot("kinetic", cfg.n_x, cfg.n_v, cfg.l_x, cfg.l_v, state.t, cfg.eps,
                    {"F": state.F, "E": state.em.E, "B": state.em.B})


def fluid_snapshot(state, cfg: RunConfig) -> Snapshot:
    return Snapshot("fluid", cfg.n_x, cfg.n_v, cfg.l_x, cfg.l_v, state.t, cfg.eps,
                    {"rho": state.rho, "u": state.u, "theta": state.theta,
                     "E": state.em.E, "B": state.em.B})


def state_from_snapshot(snap: Snapshot):
    from .fluid_solver import FluidState
    from .kinetic_solver import KineticState
    em = EMField(snap.arrays["E"], snap.arrays["B"])
    if snap.kind == "kinetic":
        return KineticState(snap.arrays["F"], em, snap.t, snap.eps)
    return FluidState(snap.arrays["rho"], snap.arrays["u"], snap.arrays["theta"], em, snap.t)


# -- well-prepared data and the sweep -----------------------------------------

def prepare_well_prepared(cfg: RunConfig):
    """Kinetic and fluid states at t = 0 with F equal to the fluid Maxwellian."""
    from .fluid_solver import FluidState, theta_of_rho
    from .kinetic_solver import KineticState
    sg, vg = cfg.sgrid, cfg.vgrid
    x = sg.nodes
    rho = 1.0 + cfg.eta0 * np.cos(2.0 * math.pi * x / cfg.l_x)
    u = np.zeros((cfg.n_x, 3))
    theta = theta_of_rho(rho)
    E = init_e_from_density(rho, sg)
    B = np.zeros((cfg.n_x, 3))
    B[:, 0] = cfg.b_const
    em = EMField(E, B)
    ge, gb = gauss_residual(em, rho, sg)
    if ge > cfg.tol.gauss or gb > cfg.tol.gauss:
        raise ConfigError(f"initial Gauss residuals ({ge:.2e}, {gb:.2e}) exceed tol_gauss")
    F = eval_maxwellian(FluidMoments(rho, u, theta), vg)
    return (KineticState(F, em.copy(), 0.0, cfg.eps), FluidState(rho, u, theta, em.copy(), 0.0))


@dataclass
class SweepPlan:
    eps_list: tuple
    a_exp: float = 0.0
    template: RunConfig = field(default_factory=RunConfig)
    seed: int = 0

    def __post_init__(self):
        e = tuple(float(v) for v in self.eps_list)
        if len(e) < 3:
            raise ConfigError(f"a sweep needs at least 3 eps values, got {len(e)}")
        if any(v <= 0 for v in e) or any(b >= a for a, b in zip(e, e[1:])):
            raise ConfigError(f"eps_list must be strictly decreasing and positive, got {e}")
        if not 0.0 <= self.a_exp < 0.5:
            raise ConfigError("a_exp must lie in [0, 1/2)")
        self.eps_list = e


@dataclass
class SweepRow:
    eps: float
    sup_l2: float
    sup_linf_x: float
    sup_field_l2: float
    sup_field_linf: float
    sup_micro: float
    t_max_ref: float
    complete: bool
    seconds: float = 0.0


@dataclass
class SweepReport:
    rows: list
    slope: float
    intercept: float
    r2: float
    target: float
    micro_ratios: list
    config_hash: str
    kernel_mode: str
    tolerances: Tolerances
    complete: bool
    rejected: list = field(default_factory=list)


def parse_eps_list(s: str) -> tuple:
    try:
        return tuple(float(v) for v in s.replace(";", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse eps_list {s!r}") from exc


def sweep_eps(plan: SweepPlan, kernel=None, progress=None, fluid_traj=None) -> SweepReport:
    """Run the fluid reference once and the kinetic solver per eps; fit the rate."""
    import time

    from .collision import CollisionKernel
    from .diagnostics import fit_rate, limit_error, t_max_reference
    from .fluid_solver import run_fluid
    from .kinetic_solver import KineticModel, NumericalAbort, run_kinetic

    cfg0 = plan.template.with_(a_exp=plan.a_exp)
    if kernel is None:
        kernel = CollisionKernel(cfg0.vgrid, cfg0.kernel_mode, cfg0.line_order)
    kin0, flu0 = prepare_well_prepared(cfg0)
    if fluid_traj is None:
        fluid_traj = run_fluid(cfg0, flu0)
    rows, complete = [], True
    for eps in plan.eps_list:
        cfg = cfg0.with_(eps=eps)
        t0 = time.time()
        model = KineticModel(cfg.vgrid, cfg.sgrid, kernel, eps, cfl=cfg.cfl)
        ok = True
        try:
            traj = run_kinetic(cfg, kin0, model=model)
        except NumericalAbort as exc:
            traj, ok = exc.trajectory, False
            complete = False
        errs = [limit_error(k, f, cfg.vgrid, cfg.sgrid)
                for k, f in zip(traj.states, fluid_traj.states)]
        row = SweepRow(eps, max(e.l2 for e in errs), max(e.linf_x for e in errs),
                       max(e.field_l2 for e in errs), max(e.field_linf for e in errs),
                       max(r["micro_norm"] for r in traj.series),
                       t_max_reference(eps, cfg.eta0, plan.a_exp), ok, time.time() - t0)
        rows.append(row)
        if progress:
            progress(row)
    fit = fit_rate([(r.eps, r.sup_l2) for r in rows])
    ratios = [b.sup_micro / a.sup_micro for a, b in zip(rows, rows[1:])]
    return SweepReport(rows, fit.slope, fit.intercept, fit.r2, 1.0 - plan.a_exp, ratios,
                       config_hash(cfg0), cfg0.kernel_mode, cfg0.tol, complete, fit.rejected)
