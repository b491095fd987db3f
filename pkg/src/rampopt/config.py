"""Run configuration: one INI file aggregating every physical and
numerical parameter, with documented defaults and strict validation.

The file has sections ``[mesh] [material] [time] [ocp] [solver] [sqp]
[output]``. Every key has a default, so an empty (or absent) file is a
complete, runnable configuration — the bundled demo problem. Unknown
sections or keys are rejected rather than ignored: a typo that silently
falls back to a default would poison a parameter study.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import linsolve, ocp, sqp
from .fem import MaterialProperties
from .mesh import BladeSpec, Mesh, PatchLabel, generate_annular_sector, \
    generate_box, read_gmsh, retag

__all__ = ["ConfigError", "MeshConfig", "RunConfig", "load_config",
           "render_config", "build_mesh"]


class ConfigError(Exception):
    """Malformed, unknown or inconsistent configuration input."""


# name -> (type tag, default, comment). Material keys are spelled out in
# engineering terms and mapped onto the dataclass fields below.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "mesh": {
        "source": ("str", "bundled",
                   "'bundled' demo mesh, 'generate', or a Gmsh .msh path"),
        "kind": ("str", "annular-sector",
                 "generator shape: annular-sector | box"),
        "r_inner": ("float", 0.0, "bore radius [m] (0 = solid disk)"),
        "r_outer": ("float", 0.25, "rim radius [m]"),
        "z_len": ("float", 0.02, "axial thickness [m]"),
        "angle_deg": ("float", 90.0, "sector angle [deg]"),
        "resolution": ("str", "demo",
                       "preset smoke|coarse|demo or explicit 'nr,nt,nz'"),
        "blade": ("bool", True, "fuse a blade block onto the rim"),
        "blade_height": ("float", 0.20, "radial blade extent [m]"),
        "blade_radial_cells": ("int", 6, "blade layers"),
        "blade_theta_cells": ("int", 2, "rim faces spanned tangentially"),
        "blade_z_cells": ("int", 3, "rim faces spanned axially"),
        "blade_grading": ("float", 1.5, "layer growth away from the root"),
        "blade_on_cut": ("bool", True,
                         "put the footprint on the theta=0 symmetry cut "
                         "(half a blade) instead of centering it"),
        "gas_washed_end": ("bool", True,
                           "tag the z=z_len end face convective (hot-gas "
                           "side); the opposite face stays insulated "
                           "(cavity side)"),
        "lx": ("float", 1.0, "box generator: edge lengths [m]"),
        "ly": ("float", 1.0, ""),
        "lz": ("float", 1.0, ""),
        "nx": ("int", 1, "box generator: subdivisions"),
        "ny": ("int", 1, ""),
        "nz": ("int", 1, ""),
    },
    "material": {
        "youngs_modulus": ("float", 210e9, "E [Pa]"),
        "poisson_ratio": ("float", 0.3, "nu [-]"),
        "density": ("float", 8050.0, "rho [kg/m^3]"),
        "thermal_expansion": ("float", 13.5e-6, "alpha [1/K]"),
        "specific_heat": ("float", 420.0, "c_p [J/(kg K)]"),
        "conductivity": ("float", 36.0, "k [W/(m K)]"),
        "film_coefficient": ("float", 20.0, "h [W/(m^2 K)]"),
        "reference_temperature": ("float", 0.0,
                                  "stress-free temperature [degC]"),
    },
    "time": {
        "n_steps": ("int", 20, "control knots / implicit Euler steps"),
        "t_final": ("float", 1800.0, "horizon [s]"),
    },
    "ocp": {
        "t_e_min": ("float", 0.0, "gas temperature bounds [degC]"),
        "t_e_max": ("float", 1000.0, ""),
        "omega_min": ("float", 0.0, "rotation bounds [Hz]"),
        "omega_max": ("float", 60.0, ""),
        "t_e_terminal": ("float", 750.0, "T_e(t_f) >= this [degC]"),
        "omega_terminal": ("float", 60.0, "omega(t_f) == this [Hz]"),
        "temp_terminal": ("float", 400.0, "max T(t_f) >= this [degC]"),
        "omega_rate_limit": ("float", 0.1, "acceleration cap [Hz/s]"),
        "symmetric_rate": ("bool", False, "also cap deceleration"),
        "guess": ("str", "heat-first",
                  "starting schedule: heat-first | linear-ramp"),
    },
    "solver": {
        "method": ("str", "auto", "linear solver: auto | direct | cg"),
        "rel_tol": ("float", 1e-10, "iterative solver residual target"),
        "max_iter": ("int", 0, "iterative solver cap; 0 = automatic"),
        "preconditioner": ("str", "jacobi", "jacobi | none"),
        "lumped_mass": ("bool", True,
                        "lumped heat capacity (monotone transients)"),
    },
    "sqp": {
        "f_tol": ("float", 1e-8, "objective convergence tolerance"),
        "max_iter": ("int", 200, "iteration cap"),
        "fd_step": ("float", 1.49e-8, "relative finite-difference step"),
        "central": ("bool", False, "central instead of forward differences"),
        "feas_tol": ("float", 1e-6, "constraint violation tolerance"),
        "penalty_growth": ("float", 2.0, "merit penalty growth factor"),
        "max_backtracks": ("int", 10, "line-search halvings"),
        "armijo": ("float", 0.1, "sufficient-decrease fraction"),
        "stall_limit": ("int", 3, "consecutive failed searches tolerated"),
        "workers": ("int", 1, "concurrent model evaluations"),
        "restart": ("bool", True, "one Hessian/penalty reset on stall"),
    },
    "output": {
        "directory": ("str", "runs/latest", "result directory"),
        "vtk": ("bool", True, "write per-step VTK fields"),
        "figures": ("bool", True, "render PNG plots next to the CSVs"),
    },
}

_COERCE = {
    "str": lambda s: s,
    "float": float,
    "int": int,
}


def _as_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_COERCE["bool"] = _as_bool


@dataclass(frozen=True)
class MeshConfig:
    source: str
    kind: str
    r_inner: float
    r_outer: float
    z_len: float
    angle_deg: float
    resolution: str
    blade: bool
    blade_height: float
    blade_radial_cells: int
    blade_theta_cells: int
    blade_z_cells: int
    blade_grading: float
    blade_on_cut: bool
    gas_washed_end: bool
    lx: float
    ly: float
    lz: float
    nx: int
    ny: int
    nz: int


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshConfig
    material: MaterialProperties
    problem: ocp.OcpProblem
    solver: linsolve.SolverSettings
    sqp: sqp.SqpSettings
    lumped_mass: bool
    guess: str
    output_dir: str
    write_vtk: bool
    write_figures: bool


def _parse_sections(path: str | None) -> dict[str, dict[str, object]]:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#"))
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")

    values: dict[str, dict[str, object]] = {}
    unknown_sections = sorted(set(parser.sections()) - set(_SCHEMA))
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {unknown_sections}")
    for section, keys in _SCHEMA.items():
        out = {}
        present = dict(parser.items(section)) if parser.has_section(
            section) else {}
        unknown = sorted(set(present) - set(keys))
        if unknown:
            raise ConfigError(
                f"unknown keys in [{section}]: {unknown}")
        for key, (tag, default, _help) in keys.items():
            if key in present:
                try:
                    out[key] = _COERCE[tag](present[key])
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for [{section}] {key}: {exc}") from None
            else:
                out[key] = default
        values[section] = out
    return values


def load_config(path: str | None = None) -> RunConfig:
    """Parse and validate a config file (``None`` = all defaults)."""
    v = _parse_sections(path)
    m = v["material"]
    mat = MaterialProperties(
        E=m["youngs_modulus"], nu=m["poisson_ratio"], rho=m["density"],
        alpha=m["thermal_expansion"], c_p=m["specific_heat"],
        k=m["conductivity"], h=m["film_coefficient"],
        T0=m["reference_temperature"],
    )
    o, t = v["ocp"], v["time"]
    if o["guess"] not in ("heat-first", "linear-ramp"):
        raise ConfigError(f"unknown guess kind {o['guess']!r}")
    try:
        problem = ocp.OcpProblem(
            n_steps=t["n_steps"], t_final=t["t_final"],
            t_e_bounds=(o["t_e_min"], o["t_e_max"]),
            omega_bounds=(o["omega_min"], o["omega_max"]),
            t_e_terminal=o["t_e_terminal"],
            omega_terminal=o["omega_terminal"],
            temp_terminal=o["temp_terminal"],
            omega_rate_limit=o["omega_rate_limit"],
            symmetric_rate=o["symmetric_rate"],
        )
        s = v["solver"]
        solver = linsolve.SolverSettings(
            method=s["method"], rel_tol=s["rel_tol"],
            max_iter=s["max_iter"] or None,
            preconditioner=s["preconditioner"],
        )
        q = v["sqp"]
        sqp_settings = sqp.SqpSettings(
            f_tol=q["f_tol"], max_iter=q["max_iter"], fd_step=q["fd_step"],
            central=q["central"], feas_tol=q["feas_tol"],
            penalty_growth=q["penalty_growth"],
            max_backtracks=q["max_backtracks"], armijo=q["armijo"],
            stall_limit=q["stall_limit"], workers=q["workers"],
            restart=q["restart"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        mesh=MeshConfig(**v["mesh"]),
        material=mat,
        problem=problem,
        solver=solver,
        sqp=sqp_settings,
        lumped_mass=v["solver"]["lumped_mass"],
        guess=o["guess"],
        output_dir=v["output"]["directory"],
        write_vtk=v["output"]["vtk"],
        write_figures=v["output"]["figures"],
    )


def render_config(cfg: RunConfig) -> str:
    """The fully resolved configuration as INI text (the run's echo)."""
    back = {
        "mesh": {k: getattr(cfg.mesh, k) for k in _SCHEMA["mesh"]},
        "material": {
            "youngs_modulus": cfg.material.E,
            "poisson_ratio": cfg.material.nu,
            "density": cfg.material.rho,
            "thermal_expansion": cfg.material.alpha,
            "specific_heat": cfg.material.c_p,
            "conductivity": cfg.material.k,
            "film_coefficient": cfg.material.h,
            "reference_temperature": cfg.material.T0,
        },
        "time": {"n_steps": cfg.problem.n_steps,
                 "t_final": cfg.problem.t_final},
        "ocp": {
            "t_e_min": cfg.problem.t_e_bounds[0],
            "t_e_max": cfg.problem.t_e_bounds[1],
            "omega_min": cfg.problem.omega_bounds[0],
            "omega_max": cfg.problem.omega_bounds[1],
            "t_e_terminal": cfg.problem.t_e_terminal,
            "omega_terminal": cfg.problem.omega_terminal,
            "temp_terminal": cfg.problem.temp_terminal,
            "omega_rate_limit": cfg.problem.omega_rate_limit,
            "symmetric_rate": cfg.problem.symmetric_rate,
            "guess": cfg.guess,
        },
        "solver": {
            "method": cfg.solver.method,
            "rel_tol": cfg.solver.rel_tol,
            "max_iter": cfg.solver.max_iter or 0,
            "preconditioner": cfg.solver.preconditioner,
            "lumped_mass": cfg.lumped_mass,
        },
        "sqp": {k: getattr(cfg.sqp, k) for k in _SCHEMA["sqp"]},
        "output": {"directory": cfg.output_dir, "vtk": cfg.write_vtk,
                   "figures": cfg.write_figures},
    }
    buf = io.StringIO()
    for section, keys in _SCHEMA.items():
        buf.write(f"[{section}]\n")
        for key, (_tag, _default, help_text) in keys.items():
            if help_text:
                buf.write(f"; {help_text}\n")
            buf.write(f"{key} = {back[section][key]}\n")
        buf.write("\n")
    return buf.getvalue()


def _gas_washed(mesh: Mesh) -> Mesh:
    # Only the z = z_len end faces the gas stream; its outward normal is
    # +z. The one-sided convection keeps a through-thickness gradient
    # alive, which pins the stress maximum to the washed face instead of
    # letting it wander between near-tied axial layers.
    def selector(_i, _c, n):
        if n[2] > 1.0 - 1e-9:
            return PatchLabel.ROBIN
        return None

    return retag(mesh, selector)


def _parse_resolution(raw: str):
    if "," in raw:
        try:
            parts = tuple(int(p) for p in raw.split(","))
        except ValueError:
            raise ConfigError(f"bad resolution {raw!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"resolution needs three counts, got {raw!r}")
        return parts
    return raw


def build_mesh(mesh_cfg: MeshConfig) -> Mesh:
    """Produce the configured mesh: bundled file, generator, or .msh path."""
    if mesh_cfg.source == "bundled":
        ref = resources.files("rampopt").joinpath("data/disk_blade.msh")
        with resources.as_file(ref) as path:
            return read_gmsh(str(path))
    if mesh_cfg.source != "generate":
        return read_gmsh(mesh_cfg.source)
    if mesh_cfg.kind == "box":
        return generate_box(mesh_cfg.lx, mesh_cfg.ly, mesh_cfg.lz,
                            mesh_cfg.nx, mesh_cfg.ny, mesh_cfg.nz)
    if mesh_cfg.kind != "annular-sector":
        raise ConfigError(f"unknown mesh kind {mesh_cfg.kind!r}")
    blade = None
    if mesh_cfg.blade:
        blade = BladeSpec(
            height=mesh_cfg.blade_height,
            radial_cells=mesh_cfg.blade_radial_cells,
            theta_cells=mesh_cfg.blade_theta_cells,
            z_cells=mesh_cfg.blade_z_cells,
            grading=mesh_cfg.blade_grading,
            on_cut=mesh_cfg.blade_on_cut,
        )
    mesh = generate_annular_sector(
        mesh_cfg.r_inner, mesh_cfg.r_outer, mesh_cfg.z_len,
        np.deg2rad(mesh_cfg.angle_deg), blade=blade,
        resolution=_parse_resolution(mesh_cfg.resolution),
    )
    if mesh_cfg.gas_washed_end:
        mesh = _gas_washed(mesh)
    return mesh
