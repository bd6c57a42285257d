"""Command-line entry point: ``vmbkit <subcommand> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grids import ConfigError, NonFiniteError, RunConfig

log = logging.getLogger("vmbkit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _numeric_errors():
    from .burnett import ConsistencyError as BurnettConsistency
    from .collision import NumericalError, SolverError
    from .diagnostics import ConsistencyError
    from .fluid_solver import ResolutionLossError
    from .kinetic_solver import NumericalAbort
    from .maxwellian import DegenerateStateError, QuadratureCalibrationError
    return (NumericalAbort, SolverError, NumericalError, DegenerateStateError, QuadratureCalibrationError,
            ResolutionLossError, ConsistencyError, BurnettConsistency, NonFiniteError, FloatingPointError)


def _load(args):
    if args.config:
        from .harness import load_config
        cfg, extras = load_config(args.config)
    else:
        cfg, extras = RunConfig(), {}
    seed = args.seed if args.seed is not None else extras.get("seed", 0)
    return cfg, extras, seed


def _check_velocity_grid(cfg):
    """Reject velocity grids that miss tol_quad or tol_gram at the global Maxwellian."""
    from .maxwellian import FluidMoments, gram_defect
    cfg.vgrid.calibrate(cfg.tol.quad)
    d = gram_defect(FluidMoments.constant(), cfg.vgrid)
    if d > cfg.tol.gram:
        raise ConfigError(f"velocity grid (n_v={cfg.n_v}, l_v={cfg.l_v}) has Gram defect "
                          f"{d:.3e} > tol_gram={cfg.tol.gram:.1e}")


def _floats(text, what):
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} {text!r}") from exc


def _kernel(cfg, **kw):
    from .collision import CollisionKernel
    return CollisionKernel(cfg.vgrid, cfg.kernel_mode, cfg.line_order, **kw)


# -- subcommands --------------------------------------------------------------

def cmd_transport_coeffs(args, cfg, extras, seed, out: Path):
    from .burnett import transport_coeffs
    from .harness import write_csv
    from .maxwellian import FluidMoments
    kernel = _kernel(cfg)
    thetas = _floats(extras.get("thetas", "1.0,1.5,2.0"), "thetas")
    rows = []
    for th in thetas:
        tc = transport_coeffs(FluidMoments.constant(theta=th), kernel, tol=cfg.tol.solve)
        rows.append((th, tc.mu_theta, tc.kappa_theta, tc.residual, tc.mu_spread, tc.kappa_spread))
        print(f"theta={th:.6g}  mu={tc.mu_theta:.10e}  kappa={tc.kappa_theta:.10e}")
    write_csv(out / "transport_coeffs.csv",
              ["theta", "mu", "kappa", "solve_residual", "mu_spread", "kappa_spread"], rows)


def cmd_burnett_check(args, cfg, extras, seed, out: Path):
    from .burnett import burnett_property_report, burnett_solve
    from .harness import write_csv
    from .maxwellian import FluidMoments
    kernel = _kernel(cfg)
    rows, ok = [], True
    for rho in (1.0, 2.0):
        for u in ((0.0, 0.0, 0.0), (0.1, 0.0, 0.0)):
            for th in (1.0, 1.5, 2.0):
                rep = burnett_property_report(
                    burnett_solve(FluidMoments.constant(rho, u, th), kernel, tol=cfg.tol.solve))
                ok &= rep.passed
                rows += [(rho, u[0], th, r.prop, r.name, r.lhs, r.rhs, r.defect, r.passed) for r in rep.rows]
                worst = max(r.defect for r in rep.rows)
                print(f"rho={rho:g} u1={u[0]:g} theta={th:g}  worst defect {worst:.3e}  "
                      f"{'pass' if rep.passed else 'FAIL'}")
    write_csv(out / "burnett_check.csv",
              ["rho", "u1", "theta", "property", "name", "lhs", "rhs", "defect", "passed"], rows)
    print("all properties hold" if ok else "some properties exceed tolerance")


def cmd_spectrum(args, cfg, extras, seed, out: Path):
    from .collision import CollisionKernel, coercivity_gap
    from .grids import VelocityGrid
    from .harness import write_csv
    from .maxwellian import FluidMoments
    nv = int(extras.get("spectrum_nv", 12))
    grid = VelocityGrid(nv, cfg.l_v)
    kernel = CollisionKernel(grid, "direct", cfg.line_order)
    rep = coercivity_gap(FluidMoments.constant(), kernel, seed=seed)
    print(f"n_v={nv}  c1={rep.c1:.10e}  gap(1/M form)={rep.lm_gap:.10e}  c2={rep.c2:.6e}  "
          f"C={rep.big_c:.6e}  weight condition={rep.condition:.3e}")
    write_csv(out / "spectrum.csv", ["n_v", "l_v", "c1", "lm_gap", "c2", "big_c", "condition"],
              [(nv, cfg.l_v, rep.c1, rep.lm_gap, rep.c2, rep.big_c, rep.condition)])


def _series_csv(path, series):
    from .harness import write_csv
    keys = list(series[0])
    write_csv(path, keys, [[r[k] for k in keys] for r in series])


def cmd_run_kinetic(args, cfg, extras, seed, out: Path):
    from .harness import kinetic_snapshot, prepare_well_prepared, save_snapshot
    from .kinetic_solver import NumericalAbort, run_kinetic
    kin, _ = prepare_well_prepared(cfg)
    snapdir = out / "kinetic"
    count = [0]

    def observe(state, rec):
        save_snapshot(snapdir / f"snap_{count[0]:05d}.vmbs", kinetic_snapshot(state, cfg))
        count[0] += 1
        log.info("t=%.4f mass=%.15e energy=%.15e micro=%.3e", rec["t"], rec["mass"], rec["energy"],
                 rec["micro_norm"])

    try:
        traj = run_kinetic(cfg, kin, kernel=_kernel(cfg), observer=observe)
    except NumericalAbort as exc:
        if exc.trajectory is not None and exc.trajectory.series:
            _series_csv(out / "kinetic_series.csv", exc.trajectory.series)
        raise
    _series_csv(out / "kinetic_series.csv", traj.series)
    print(f"wrote {count[0]} snapshots to {snapdir}")


def cmd_run_fluid(args, cfg, extras, seed, out: Path):
    from .fluid_solver import run_fluid
    from .harness import fluid_snapshot, prepare_well_prepared, save_snapshot
    _, flu = prepare_well_prepared(cfg)
    traj = run_fluid(cfg, flu)
    snapdir = out / "fluid"
    for i, s in enumerate(traj.states):
        save_snapshot(snapdir / f"snap_{i:05d}.vmbs", fluid_snapshot(s, cfg))
    _series_csv(out / "fluid_series.csv", traj.series)
    print(f"wrote {len(traj.states)} snapshots to {snapdir}")


def _snapshots(directory, cfg, kind):
    from .harness import load_snapshot, state_from_snapshot
    files = sorted(Path(directory).glob("snap_*.vmbs"))
    if not files:
        raise FileNotFoundError(f"no snapshots in {directory}")
    expect = {"n_x": cfg.n_x, "n_v": cfg.n_v, "l_x": cfg.l_x, "l_v": cfg.l_v}
    snaps = [load_snapshot(f, expect) for f in files]
    if any(s.kind != kind for s in snaps):
        raise ConfigError(f"{directory} does not hold {kind} snapshots")
    return [state_from_snapshot(s) for s in snaps]


def cmd_compare(args, cfg, extras, seed, out: Path):
    from .collision import nu_weight
    from .diagnostics import energy_functionals, limit_error, perturbation_from, theta_residual_check
    from .harness import write_csv
    from .kinetic_solver import KineticModel
    from .maxwellian import FluidMoments
    kdir = Path(args.kinetic or out / "kinetic")
    fdir = Path(args.fluid or out / "fluid")
    kins = _snapshots(kdir, cfg, "kinetic")
    flus = {round(s.t, 12): s for s in _snapshots(fdir, cfg, "fluid")}
    kernel = _kernel(cfg)
    model = KineticModel(cfg.vgrid, cfg.sgrid, kernel, cfg.eps, cfl=cfg.cfl)
    nu = nu_weight(FluidMoments.constant(), kernel).values
    rows = []
    for i, k in enumerate(kins):
        f = flus.get(round(k.t, 12))
        if f is None:
            raise ConfigError(f"no fluid snapshot at t={k.t}")
        err = limit_error(k, f, cfg.vgrid, cfg.sgrid)
        p = perturbation_from(k, f, cfg.eps, kernel, cfg.sgrid, cfg.tol.micro)
        rep = energy_functionals(p, cfg.n_sobolev, cfg.sgrid, cfg.vgrid, nu)
        theta = float("nan")
        if 0 < i < len(kins) - 1:
            theta = theta_residual_check(kins[i - 1:i + 2], model, tol=cfg.tol.solve).residual
        rows.append((k.t, err.l2, err.linf_x, err.field_l2, err.field_linf, rep.e_n, rep.d_n, theta))
    write_csv(out / "compare.csv", ["t", "l2", "linf_x", "field_l2", "field_linf", "e_n", "d_n",
                                    "theta_residual"], rows)
    print(f"compared {len(rows)} snapshots; sup l2 = {max(r[1] for r in rows):.6e}")


def cmd_sweep_eps(args, cfg, extras, seed, out: Path):
    from .harness import SweepPlan, parse_eps_list, sweep_eps, write_csv
    eps_list = parse_eps_list(extras.get("eps_list", "0.2,0.1,0.05,0.025"))
    plan = SweepPlan(eps_list, cfg.a_exp, cfg, seed)

    def progress(row):
        print(f"eps={row.eps:g}  sup l2={row.sup_l2:.6e}  sup micro={row.sup_micro:.6e}  "
              f"({row.seconds:.1f}s{'' if row.complete else ', aborted'})", flush=True)

    rep = sweep_eps(plan, progress=progress)
    write_csv(out / "sweep.csv",
              ["eps", "sup_l2", "sup_linf_x", "sup_field_l2", "sup_field_linf", "sup_micro",
               "t_max_reference", "complete"],
              [(r.eps, r.sup_l2, r.sup_linf_x, r.sup_field_l2, r.sup_field_linf, r.sup_micro,
                r.t_max_ref, r.complete) for r in rep.rows])
    t = rep.tolerances
    summary = [
        ("slope", rep.slope), ("intercept", rep.intercept), ("r2", rep.r2), ("target", rep.target),
        ("complete", rep.complete), ("config_hash", rep.config_hash), ("kernel_mode", rep.kernel_mode),
        *[(f"tol_{k}", getattr(t, k)) for k in vars(t)],
        *[(f"micro_ratio_{i}", r) for i, r in enumerate(rep.micro_ratios)],
        ("t_max_note", "reference scale with C1 = 1; true constant unknown"),
    ]
    write_csv(out / "sweep_summary.csv", ["key", "value"], summary)
    print(f"slope={rep.slope:.4f} (target {rep.target:g})  r2={rep.r2:.4f}  "
          f"{'complete' if rep.complete else 'INCOMPLETE'}")
    if not rep.complete:
        return EXIT_NUMERIC


COMMANDS = {
    "transport-coeffs": (cmd_transport_coeffs, "viscosity and heat conductivity at a list of temperatures"),
    "burnett-check": (cmd_burnett_check, "structural properties of the Burnett functions"),
    "spectrum": (cmd_spectrum, "coercivity report of the linearized operator"),
    "run-kinetic": (cmd_run_kinetic, "well-prepared kinetic run with snapshots"),
    "run-fluid": (cmd_run_fluid, "Euler-Maxwell reference run with snapshots"),
    "compare": (cmd_compare, "limit errors, energy functionals and theta residuals per snapshot"),
    "sweep-eps": (cmd_sweep_eps, "convergence rate in eps"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--threads", metavar="K", type=int, default=None, help="worker threads")
    common.add_argument("--seed", metavar="S", type=int, default=None, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="vmbkit", parents=[common],
                                description="Kinetic-to-fluid limit experiments for a 1D3V plasma model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[common])
        if name == "compare":
            sp.add_argument("--kinetic", metavar="DIR", help="kinetic snapshot directory")
            sp.add_argument("--fluid", metavar="DIR", help="fluid snapshot directory")
    return p


def _set_threads(k):
    if k is None:
        return
    if k < 1:
        raise ConfigError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    numeric = _numeric_errors()
    try:
        _set_threads(args.threads)
        cfg, extras, seed = _load(args)
        np.random.seed(seed)
        if args.command != "spectrum":
            _check_velocity_grid(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command][0](args, cfg, extras, seed, out)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except numeric as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
