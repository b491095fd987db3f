"""Quasi-static thermoelasticity and von Mises stress tracking.

For every time knot the displacement solves the linear equilibrium with
the current temperature field and centrifugal load; the stress tensor is
recovered element-wise from the displacement gradient at the four
vertices (a discontinuous, per-element representation) and reduced to the
von Mises scalar. Stress is reported in MPa, displacement in meters.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import linsolve
from .fem import (
    MaterialProperties,
    SparseSystem,
    _element_geometry,
    elasticity_operators,
    shape_eval,
    symmetry_dofs,
)
from .mesh import Mesh, p2_tets

__all__ = [
    "StressSnapshot",
    "MechanicalTrajectory",
    "ElasticSolver",
    "RigidBodyMode",
    "von_mises",
    "von_mises_field",
    "solve_step",
    "run",
    "rigid_body_pins",
]

PA_PER_MPA = 1.0e6


class RigidBodyMode(Exception):
    """The constrained system still admits a zero-energy motion."""


@dataclass(frozen=True)
class StressSnapshot:
    """Stress state at one time knot.

    ``sigma_v`` holds one von Mises value per element vertex (MPa, the
    discontinuous representation); the maximum and the mesh node realizing
    it are precomputed, ties broken toward the lowest node index.
    """

    sigma_v: np.ndarray       # (m, 4) MPa
    max_value: float          # MPa
    max_node: int
    max_point: np.ndarray     # (3,) coordinates of the argmax node
    displacement: np.ndarray  # (n_nodes, 3) meters

    def nodal_average(self, tets: np.ndarray, n_nodes: int) -> np.ndarray:
        """Average the element-vertex values onto P1 nodes (for export)."""
        acc = np.zeros(n_nodes)
        cnt = np.zeros(n_nodes)
        np.add.at(acc, tets, self.sigma_v)
        np.add.at(cnt, tets, 1.0)
        cnt[cnt == 0.0] = 1.0
        return acc / cnt


@dataclass(frozen=True)
class MechanicalTrajectory:
    snapshots: list[StressSnapshot]
    max_over_time: float  # MPa
    argmax_step: int

    def __post_init__(self) -> None:
        peak = max(s.max_value for s in self.snapshots)
        if peak != self.max_over_time:
            raise ValueError("max_over_time inconsistent with snapshots")

    def argmax_nodes(self) -> list[int]:
        return [s.max_node for s in self.snapshots]


def von_mises(sigma) -> float:
    """Von Mises norm of a symmetric 3x3 stress tensor (same unit as input)."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape != (3, 3) or not np.allclose(s, s.T, atol=1e-9 * max(1.0, np.abs(s).max())):
        raise ValueError("expected a symmetric 3x3 tensor")
    dev = s - np.trace(s) / 3.0 * np.eye(3)
    return float(np.sqrt(1.5 * np.tensordot(dev, dev)))


def von_mises_field(sig: np.ndarray) -> np.ndarray:
    """Vectorized von Mises over trailing 3x3 axes."""
    tr = np.trace(sig, axis1=-2, axis2=-1)
    dev = sig - tr[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


def rigid_body_pins(mesh: Mesh) -> np.ndarray:
    """A 3-2-1 set of displacement DOFs that blocks all rigid motions.

    Chooses a corner node (all components fixed), a node sharing its y and
    z coordinates (y, z fixed) and a node sharing its z coordinate
    (z fixed). This pattern is compatible with unconstrained uniform
    expansion, so a stress-free state stays stress-free.
    """
    xyz = mesh.nodes[: mesh.num_p1_nodes]
    scale = max(np.ptp(xyz, axis=0).max(), 1e-30)
    tol = 1e-9 * scale
    order = np.lexsort((xyz[:, 0], xyz[:, 1], xyz[:, 2]))
    n0 = int(order[0])
    same_yz = np.flatnonzero(
        (np.abs(xyz[:, 1] - xyz[n0, 1]) < tol)
        & (np.abs(xyz[:, 2] - xyz[n0, 2]) < tol)
    )
    same_yz = same_yz[same_yz != n0]
    if len(same_yz) == 0:
        raise ValueError("no axis-aligned partner node for 3-2-1 pinning")
    n1 = int(same_yz[np.argmax(np.abs(xyz[same_yz, 0] - xyz[n0, 0]))])
    same_z = np.flatnonzero(np.abs(xyz[:, 2] - xyz[n0, 2]) < tol)
    line = xyz[n1] - xyz[n0]
    rel = xyz[same_z] - xyz[n0]
    perp = np.linalg.norm(np.cross(rel, line / np.linalg.norm(line)), axis=1)
    if perp.max() < tol:
        raise ValueError("all z-plane nodes are colinear; cannot pin rotations")
    n2 = int(same_z[np.argmax(perp)])
    return np.array(
        [3 * n0, 3 * n0 + 1, 3 * n0 + 2, 3 * n1 + 1, 3 * n1 + 2, 3 * n2 + 2],
        dtype=np.int64,
    )


def _min_eig_ratio(A: sp.csr_matrix, seed: int = 0) -> float:
    """Estimate lambda_min / lambda_max of a symmetric operator.

    Exact (dense) below a size cutoff, shifted power iteration above it;
    only used to distinguish a floating structure from a conditioning
    problem once a solve has already failed.
    """
    n = A.shape[0]
    if n <= 3000:
        lam = np.linalg.eigvalsh(A.toarray())
        return float(lam[0] / max(abs(lam[-1]), 1e-300))
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    for _ in range(100):
        v = A @ v
        v /= np.linalg.norm(v)
    lam_max = float(v @ (A @ v))
    w = rng.normal(size=n)
    for _ in range(100):
        w = lam_max * w - A @ w
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        w /= nrm
    return float(w @ (A @ w)) / lam_max


class ElasticSolver:
    """Equilibrium solver with cached operators for one mesh/material pair.

    The stiffness, constraint set, factorization and the vertex-gradient
    recovery tensors are all built once; each :meth:`solve_step` is then a
    right-hand-side assembly, one triangular solve and a stress recovery.
    ``extra_pins`` are additional displacement DOFs held at zero (e.g.
    plane-strain end faces or 3-2-1 pins for free bodies); with
    ``auto_pin`` the solver closes a free axial translation left by the
    x/y symmetry planes with a single u_z pin, which shifts the
    displacement by a constant and leaves the stress untouched.
    """

    def __init__(
        self,
        mesh: Mesh,
        mat: MaterialProperties,
        settings: linsolve.SolverSettings | None = None,
        extra_pins=None,
        auto_pin: bool = True,
    ) -> None:
        if mesh.order != 2:
            raise ValueError("displacement needs a P2 mesh; call promote_to_p2")
        self.mesh = mesh
        self.mat = mat
        self.settings = settings or linsolve.SolverSettings()
        self.K, self.C, self.f_rot = elasticity_operators(mesh, mat)
        ndof = self.K.shape[0]

        dofs = set(symmetry_dofs(mesh).tolist())
        if extra_pins is not None:
            dofs.update(int(d) for d in np.asarray(extra_pins).ravel())
        if auto_pin and dofs:
            present = {d % 3 for d in dofs}
            for comp in (0, 1, 2):
                if comp not in present:
                    anchor = min(d // 3 for d in dofs)
                    dofs.add(3 * anchor + comp)
        self.constrained = np.fromiter(sorted(dofs), dtype=np.int64)

        keep = np.ones(ndof)
        keep[self.constrained] = 0.0
        self._keep = keep
        Z = sp.diags(keep)
        self.A = (Z @ self.K @ Z + sp.diags(1.0 - keep)).tocsr()
        self._solve_cached = None

        # recovery operators: physical basis gradients at the 4 vertices
        self.conn = p2_tets(mesh)
        inv_edge, _ = _element_geometry(mesh)
        rg = np.array(
            [shape_eval(2, np.eye(4)[v])[1] for v in range(4)]
        )  # (4, 10, 3) reference gradients
        self.G = np.einsum("eij,vaj->evai", inv_edge, rg)

    @property
    def n_dofs(self) -> int:
        return self.K.shape[0]

    def _floating(self) -> bool:
        return _min_eig_ratio(self.A) < 1e-10

    def _solve(self, b: np.ndarray) -> np.ndarray:
        if self.settings.method == "cg":
            system = SparseSystem(self.A, b, np.empty((0, 2), dtype=np.int64))
            try:
                info = linsolve.solve_info(system, self.settings)
            except linsolve.SingularMatrix:
                if self._floating():
                    raise RigidBodyMode(
                        "conjugate gradients met zero curvature and the "
                        "constrained stiffness has a near-zero eigenvalue; "
                        "the pins leave a rigid motion free"
                    ) from None
                raise
            if not info.converged:
                if self._floating():
                    raise RigidBodyMode(
                        "equilibrium solve stagnated on a floating "
                        "structure; add pins"
                    )
                warnings.warn(
                    f"equilibrium solve stalled at residual {info.residual:.3e}",
                    linsolve.NotConverged,
                    stacklevel=3,
                )
            return info.x
        if self._solve_cached is None:
            try:
                self._solve_cached = linsolve.factorized_solver(self.A)
            except RuntimeError as exc:
                if "singular" in str(exc).lower() and self._floating():
                    raise RigidBodyMode(
                        "stiffness factorization found an exact zero pivot; "
                        "the constraints leave a rigid motion free"
                    ) from None
                raise
            # a generic RHS has a component along any zero-energy mode,
            # which a (numerically) singular factorization cannot return
            probe = np.random.default_rng(0).normal(size=self.A.shape[0])
            defect = np.linalg.norm(self.A @ self._solve_cached(probe) - probe)
            if defect > 1e-6 * np.linalg.norm(probe) and self._floating():
                raise RigidBodyMode(
                    "stiffness factorization cannot reproduce a generic "
                    "load; the constraints leave a rigid motion free"
                )
        u = self._solve_cached(b)
        norm_b = np.linalg.norm(b)
        if norm_b > 0.0:
            defect = np.linalg.norm(self.A @ u - b) / norm_b
            if defect > 1e-8 and self._floating():
                raise RigidBodyMode(
                    "factorized solve lost all accuracy (relative residual "
                    f"{defect:.1e}); the constraints leave a rigid motion free"
                )
        return u

    def solve_step(self, T_n: np.ndarray, omega_n: float) -> StressSnapshot:
        """Equilibrium for one temperature field and rotation (rad/s)."""
        T_n = np.asarray(T_n, dtype=np.float64)
        b = self.C @ (T_n - self.mat.T0) + omega_n**2 * self.f_rot
        b = self._keep * b
        u = self._solve(b)
        return self._recover(u, T_n)

    def _recover(self, u: np.ndarray, T_n: np.ndarray) -> StressSnapshot:
        ue = u.reshape(-1, 3)[self.conn]                      # (m, 10, 3)
        grad = np.einsum("eai,evaj->evij", ue, self.G)        # (m, 4, 3, 3)
        eps = 0.5 * (grad + np.swapaxes(grad, -1, -2))
        tr = np.trace(eps, axis1=-2, axis2=-1)
        dT = T_n[self.mesh.tets] - self.mat.T0                # (m, 4)
        iso = self.mat.lam * tr - self.mat.beta * dT
        sig = 2.0 * self.mat.mu * eps + iso[..., None, None] * np.eye(3)
        vm = von_mises_field(sig) / PA_PER_MPA
        flat = int(np.argmax(vm))
        vmax = float(vm.ravel()[flat])
        ties = np.argwhere(vm == vmax)
        node = int(min(self.mesh.tets[e, v] for e, v in ties))
        snap = StressSnapshot(
            sigma_v=vm,
            max_value=vmax,
            max_node=node,
            max_point=self.mesh.nodes[node].copy(),
            displacement=u.reshape(-1, 3),
        )
        object.__setattr__(snap, "_tets", self.mesh.tets)
        return snap

    def run(self, schedule, thermal) -> MechanicalTrajectory:
        """One snapshot per time knot; rotation is given in Hz."""
        omega_hz = np.asarray(schedule.omega, dtype=np.float64)
        if len(thermal.fields) != len(omega_hz) + 1:
            raise ValueError("thermal trajectory does not match the schedule")
        snaps = [self.solve_step(thermal.fields[0], 0.0)]
        for i, w_hz in enumerate(omega_hz):
            snaps.append(
                self.solve_step(thermal.fields[i + 1], 2.0 * np.pi * w_hz)
            )
        peaks = [s.max_value for s in snaps]
        arg = int(np.argmax(peaks))
        return MechanicalTrajectory(snaps, peaks[arg], arg)


def solve_step(
    mesh: Mesh,
    mat: MaterialProperties,
    T_n: np.ndarray,
    omega_n: float,
    settings: linsolve.SolverSettings | None = None,
    extra_pins=None,
) -> StressSnapshot:
    """Single uncached equilibrium solve (rotation in rad/s)."""
    return ElasticSolver(mesh, mat, settings, extra_pins).solve_step(T_n, omega_n)


def run(
    mesh: Mesh,
    mat: MaterialProperties,
    schedule,
    thermal,
    settings: linsolve.SolverSettings | None = None,
    extra_pins=None,
) -> MechanicalTrajectory:
    return ElasticSolver(mesh, mat, settings, extra_pins).run(schedule, thermal)
