"""Transient heat conduction: implicit Euler with convective heating.

Marches rho*c_p dT/dt = div(k grad T) with Robin exchange
-k dT/dn = h (T - T_e) on the heated patches through N equal implicit
steps. The gas temperature T_e is piecewise constant per step and is
evaluated at the step end, consistent with the implicit scheme.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import linsolve
from .fem import MaterialProperties, SparseSystem, heat_operators
from .mesh import Mesh

__all__ = [
    "ThermalTrajectory",
    "HeatSolver",
    "PositivityViolation",
    "run",
    "volume_average",
]


class PositivityViolation(UserWarning):
    """Undershoot below the physical minimum temperature was detected.

    The consistent-mass implicit scheme is not monotone for small time
    steps; nodal values can dip under min(T0, T_e) next to a heated
    surface. The lumped-mass mode is the standard remedy.
    """


@dataclass(frozen=True)
class ThermalTrajectory:
    """Temperature history on the P1 nodes, including the initial state."""

    times: np.ndarray    # (N+1,) seconds, times[0] = 0
    fields: np.ndarray   # (N+1, n) nodal temperature [degC]
    max_T: np.ndarray    # (N+1,) spatial maxima [degC]

    def __post_init__(self) -> None:
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must start at 0 and strictly increase")
        if len(self.times) != len(self.fields) or len(self.times) != len(self.max_T):
            raise ValueError("times, fields and max_T must have equal length")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


class HeatSolver:
    """Reusable stepping engine for one mesh/material pair.

    Assembles the capacity, conduction and Robin operators once. The step
    matrix (M/dt + K + S) is factorized per distinct dt and reused, which
    makes the many identical solves of a transient run (and of
    finite-difference probing) cheap.
    """

    def __init__(
        self,
        mesh: Mesh,
        mat: MaterialProperties,
        settings: linsolve.SolverSettings | None = None,
        lumped: bool = False,
    ) -> None:
        self.mesh = mesh
        self.mat = mat
        self.settings = settings or linsolve.SolverSettings()
        self.lumped = lumped
        M, K, S, w = heat_operators(mesh, mat)
        if lumped:
            M = sp.diags(np.asarray(M.sum(axis=1)).ravel()).tocsr()
        self.M, self.K, self.S, self.w = M, K, S, w
        self._factorized: dict[float, object] = {}

    @property
    def n_dofs(self) -> int:
        return self.mesh.num_p1_nodes

    def _matrix(self, dt: float) -> sp.csr_matrix:
        return (self.M / dt + self.K + self.S).tocsr()

    def step(
        self, T_prev: np.ndarray, T_e_n: float, dt: float
    ) -> tuple[np.ndarray, linsolve.SolveResult]:
        """Advance one implicit step; returns (T_next, solve metadata)."""
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        T_prev = np.asarray(T_prev, dtype=np.float64)
        b = self.M @ T_prev / dt + T_e_n * self.w
        if self.settings.method == "cg":
            system = SparseSystem(
                self._matrix(dt), b, np.arange(self.n_dofs)[:, None]
            )
            info = linsolve.solve_info(system, self.settings)
            if not info.converged:
                warnings.warn(
                    f"heat step stalled at residual {info.residual:.3e}",
                    linsolve.NotConverged,
                    stacklevel=2,
                )
            return info.x, info
        if dt not in self._factorized:
            self._factorized[dt] = linsolve.factorized_solver(self._matrix(dt))
        x = self._factorized[dt](b)
        bnorm = np.linalg.norm(b)
        res = 0.0 if bnorm == 0.0 else float(
            np.linalg.norm(self._matrix(dt) @ x - b) / bnorm
        )
        return x, linsolve.SolveResult(x, res <= self.settings.rel_tol, 1, res)

    def run(self, schedule) -> ThermalTrajectory:
        """March through a control schedule starting from the uniform T0."""
        t_e = np.asarray(schedule.t_e, dtype=np.float64)
        dt = float(schedule.dt)
        n = len(t_e)
        if n < 1:
            raise ValueError("schedule must contain at least one step")
        fields = np.empty((n + 1, self.n_dofs))
        fields[0] = self.mat.T0
        for i in range(n):
            fields[i + 1], _ = self.step(fields[i], float(t_e[i]), dt)
        floor = min(self.mat.T0, float(t_e.min()))
        spread = max(1.0, float(max(self.mat.T0, t_e.max()) - floor))
        undershoot = floor - fields.min()
        if undershoot > 1e-6 * spread:
            warnings.warn(
                f"temperature undershoot of {undershoot:.3g} degC below the "
                f"physical minimum {floor:g}; decrease the spatial resolution "
                "mismatch, enlarge dt, or enable lumped mass",
                PositivityViolation,
                stacklevel=2,
            )
        times = dt * np.arange(n + 1)
        return ThermalTrajectory(times, fields, fields.max(axis=1))

    def volume_average(self, T: np.ndarray) -> float:
        """Capacity-weighted spatial mean of a temperature field."""
        ones = np.ones(self.n_dofs)
        return float(ones @ (self.M @ T) / (ones @ (self.M @ ones)))


def run(
    mesh: Mesh,
    mat: MaterialProperties,
    schedule,
    settings: linsolve.SolverSettings | None = None,
    lumped: bool = False,
) -> ThermalTrajectory:
    """One-shot transient run (see :class:`HeatSolver` for the loop)."""
    return HeatSolver(mesh, mat, settings, lumped).run(schedule)


def volume_average(mesh: Mesh, mat: MaterialProperties, T: np.ndarray) -> float:
    return HeatSolver(mesh, mat).volume_average(T)
