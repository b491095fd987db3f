"""Batch front-end: mesh inspection, forward simulation, optimization.

All physics and numerics live in one INI config file; the command line
only selects the command, config path, verbosity, worker count and
(optionally) the output directory or schedule source. Every run writes a
fully resolved ``config.echo`` into its output directory, so a result is
reproducible from that file plus the mesh.

Exit codes: 0 success / optimizer converged; 2 bad configuration or
input; 3 forward-model failure; 4 optimizer stopped on a nonsmooth
stall; 5 optimizer did not converge.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import figures, linsolve, ocp, vtkio
from .config import ConfigError, RunConfig, build_mesh, load_config, \
    render_config
from .mesh import MalformedFile, boundary_normals, mesh_info, total_volume
from .ocp import ForwardModel, OptimizationDriver
from .sqp import SqpResult

log = logging.getLogger("rampopt")

CONTROLS_HEADER = ["step", "time_s", "T_e_C", "omega_Hz",
                   "max_sigma_v_MPa", "max_T_C", "argmax_node"]
ITERATIONS_HEADER = ["iter", "J_MPa", "max_violation", "step_norm", "evals"]

_STATUS_EXIT = {"Converged": 0, "NonsmoothStall": 4, "NotConverged": 5}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_controls_csv(record, path) -> None:
    """Controls + responses, one row per knot (step 0 = initial state)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONTROLS_HEADER)
        for step, t, t_e, om, sig, temp, node in record.per_step_table():
            writer.writerow([
                step, _fmt(t), "" if np.isnan(t_e) else _fmt(t_e), _fmt(om),
                _fmt(sig), _fmt(temp), node,
            ])


def read_schedule_csv(path, dt_hint: float | None = None):
    """Knot schedule from a controls CSV (responses, if present, ignored)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"step", "time_s", "T_e_C", "omega_Hz"} - set(rows[0] if rows
                                                            else ())
    if not rows or missing:
        raise MalformedFile(
            f"schedule CSV needs columns step,time_s,T_e_C,omega_Hz; "
            f"missing {sorted(missing) if rows else 'everything'}")
    knots = sorted(
        (int(r["step"]), float(r["time_s"]), r["T_e_C"], r["omega_Hz"])
        for r in rows if int(r["step"]) > 0
    )
    if not knots:
        raise MalformedFile("schedule CSV contains no knots (step >= 1)")
    times = np.array([k[1] for k in knots])
    dt = times[0] if dt_hint is None else dt_hint
    expected = dt * np.arange(1, len(knots) + 1)
    if np.any(np.abs(times - expected) > 1e-9 * max(1.0, times[-1])):
        raise MalformedFile("schedule CSV is not on a uniform time grid")
    t_e = np.array([float(k[2]) for k in knots])
    omega = np.array([float(k[3]) for k in knots])
    return ocp.ControlSchedule(t_e=t_e, omega=omega, dt=float(dt))


def write_iterations_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ITERATIONS_HEADER)
        for rec in history:
            writer.writerow([
                rec.iteration, _fmt(1000.0 * rec.f), _fmt(rec.max_violation),
                _fmt(rec.step_norm), rec.evaluations,
            ])


def _patch_areas(mesh) -> dict[str, float]:
    _, areas = boundary_normals(mesh)
    out: dict[str, float] = {}
    for tag, label in sorted(mesh.patch_tags.items()):
        sel = mesh.tri_tags == tag
        if sel.any():
            out[label.value] = out.get(label.value, 0.0) + float(
                areas[sel].sum())
    return out


def cmd_mesh_info(cfg: RunConfig) -> int:
    mesh = build_mesh(cfg.mesh)
    print(mesh_info(mesh))
    print(f"volume: {total_volume(mesh):.6e} m^3")
    for label, area in _patch_areas(mesh).items():
        print(f"area {label:<9}: {area:.6e} m^2")
    return 0


def _prepare_outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(render_config(cfg))
    return out


def _write_run_outputs(cfg: RunConfig, model: ForwardModel, record,
                       out: Path) -> None:
    write_controls_csv(record, out / "controls.csv")
    log.info("wrote %s", out / "controls.csv")
    if cfg.write_figures:
        figures.controls_figure(record, out / "controls.png")
        log.info("wrote %s", out / "controls.png")
    if cfg.write_vtk and record.trajectories is not None:
        thermal, mech = record.trajectories
        mesh = model.mesh
        n1 = mesh.num_p1_nodes
        points = mesh.nodes[:n1]
        for step, snap in enumerate(mech.snapshots):
            vtkio.write_vtk(
                out / f"step_{step:04d}.vtk", points, mesh.tets,
                {
                    "temperature": thermal.fields[step],
                    "displacement": snap.displacement[:n1],
                    "von_mises": snap.nodal_average(mesh.tets, n1),
                },
                title=f"state at t = {step * record.schedule.dt:g} s",
            )
        log.info("wrote %d VTK steps", len(mech.snapshots))


def _resolve_schedule(cfg: RunConfig, source: str):
    """A schedule from a guess name or a CSV file, plus a fitting problem."""
    if source in ("heat-first", "linear-ramp"):
        return ocp.initial_guess(source, cfg.problem), cfg.problem
    schedule = read_schedule_csv(source)
    problem = dataclasses.replace(
        cfg.problem, n_steps=schedule.n, t_final=schedule.t_final)
    return schedule, problem


def cmd_simulate(cfg: RunConfig, source: str) -> int:
    schedule, problem = _resolve_schedule(cfg, source)
    mesh = build_mesh(cfg.mesh)
    model = ForwardModel(mesh, cfg.material, problem, cfg.solver,
                         lumped=cfg.lumped_mass)
    record = model.evaluate(schedule, want_trajectories=cfg.write_vtk)
    out = _prepare_outdir(cfg)
    _write_run_outputs(cfg, model, record, out)
    print(f"J = {record.J:.6f} MPa at step {record.argmax_step} "
          f"(node {record.step_argmax_node[record.argmax_step]})")
    print(f"max T(t_f) = {record.step_max_temp[-1]:.2f} C, "
          f"worst violation {record.max_violation():.3e}")
    return 0


def cmd_optimize(cfg: RunConfig) -> int:
    mesh = build_mesh(cfg.mesh)
    model = ForwardModel(mesh, cfg.material, cfg.problem, cfg.solver,
                         lumped=cfg.lumped_mass)
    guess = ocp.initial_guess(cfg.guess, cfg.problem)
    driver = OptimizationDriver(model, cfg.sqp)

    def progress(rec):
        log.info("iter %3d  J %10.4f MPa  viol %9.3e  step %9.3e  evals %d",
                 rec.iteration, 1000.0 * rec.f, rec.max_violation,
                 rec.step_norm, rec.evaluations)

    result: SqpResult = driver.run(guess, callback=progress)
    out = _prepare_outdir(cfg)
    write_iterations_csv(result.history, out / "iterations.csv")
    if cfg.write_figures and result.history:
        figures.iterations_figure(result.history, out / "iterations.png")

    final = model.evaluate(driver.schedule_at(result.x),
                           want_trajectories=cfg.write_vtk)
    _write_run_outputs(cfg, model, final, out)
    print(f"status {result.status} after {result.iterations} iterations, "
          f"{model.evaluations} forward evaluations")
    print(f"J = {final.J:.6f} MPa (started at {1000.0 * result.history[0].f:.6f})"
          if result.history else f"J = {final.J:.6f} MPa")
    print(f"max scaled violation {final.max_violation():.3e}")
    return _STATUS_EXIT.get(result.status, 5)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rampopt",
        description="transient thermo-mechanical schedule optimization",
    )
    parser.add_argument("-c", "--config", default=None,
                        help="INI config path (default: built-in defaults)")
    parser.add_argument("-o", "--output", default=None,
                        help="override the output directory")
    parser.add_argument("--workers", type=int, default=None,
                        help="override the evaluation worker count")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="per-iteration/log output")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mesh-info", help="print mesh statistics")
    sim = sub.add_parser("simulate", help="run one forward simulation")
    sim.add_argument("--schedule", default=None,
                     help="'heat-first', 'linear-ramp' or a controls CSV "
                          "(default: the configured guess)")
    sub.add_parser("optimize", help="optimize the control schedules")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.output is not None:
            cfg = dataclasses.replace(cfg, output_dir=args.output)
        if args.workers is not None:
            cfg = dataclasses.replace(
                cfg, sqp=dataclasses.replace(cfg.sqp, workers=args.workers))
        if args.command == "mesh-info":
            return cmd_mesh_info(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.schedule or cfg.guess)
        return cmd_optimize(cfg)
    except (ConfigError, MalformedFile, FileNotFoundError,
            ocp.InfeasibleRateLimit) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ocp.ForwardModelFailure, linsolve.SingularMatrix) as exc:
        print(f"forward model failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
