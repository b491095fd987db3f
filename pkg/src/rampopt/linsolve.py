"""Solvers for the SPD systems produced by assembly.

Two single-shot paths: Jacobi-preconditioned conjugate gradients (the
default, scales to the refined meshes) and a dense Cholesky factorization
for small systems and for cross-checking. Transient runs solve the same
matrix against many right-hand sides; :func:`factorized_solver` wraps a
sparse LU factorization for that case.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .fem import SparseSystem

__all__ = [
    "SolverSettings",
    "SolveResult",
    "NotConverged",
    "SingularMatrix",
    "solve",
    "solve_info",
    "factorized_solver",
]

DIRECT_SIZE_LIMIT = 2000


class NotConverged(UserWarning):
    pass


class SingularMatrix(Exception):
    pass


@dataclass(frozen=True)
class SolverSettings:
    """method: 'cg' | 'direct' | 'auto' (direct below 2000 DOFs, else CG)."""

    method: str = "auto"
    rel_tol: float = 1e-10
    max_iter: int | None = None  # defaults to 10 * dofs
    preconditioner: str = "jacobi"  # 'jacobi' | 'none'

    def __post_init__(self) -> None:
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in ("cg", "direct", "direct-cholesky", "auto"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.preconditioner not in ("jacobi", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float  # ||Ax - b|| / ||b||


def _cg(system: SparseSystem, settings: SolverSettings) -> SolveResult:
    A, b = system.matrix, system.rhs
    n = len(b)
    max_iter = settings.max_iter if settings.max_iter is not None else 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), True, 0, 0.0)
    if settings.preconditioner == "jacobi":
        d = A.diagonal()
        if np.any(d <= 0.0):
            raise SingularMatrix("nonpositive diagonal entry; matrix not SPD")
        minv = 1.0 / d
    else:
        minv = np.ones(n)

    x = np.zeros(n)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    best_x, best_res = x, 1.0
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise SingularMatrix("zero or negative curvature; matrix not SPD")
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res < best_res:
            best_x, best_res = x, res
        if res <= settings.rel_tol:
            return SolveResult(x, True, it, res)
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return SolveResult(best_x, False, max_iter, best_res)


def _direct(system: SparseSystem, settings: SolverSettings) -> SolveResult:
    A = system.matrix.toarray()
    try:
        c, low = sla.cho_factor(A, check_finite=False)
    except sla.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from None
    x = sla.cho_solve((c, low), system.rhs, check_finite=False)
    bnorm = np.linalg.norm(system.rhs)
    res = 0.0 if bnorm == 0.0 else float(
        np.linalg.norm(system.matrix @ x - system.rhs) / bnorm
    )
    return SolveResult(x, res <= settings.rel_tol, 1, res)


def solve_info(system: SparseSystem, settings: SolverSettings | None = None) -> SolveResult:
    """Solve and report convergence details (best iterate on failure)."""
    settings = settings or SolverSettings()
    method = settings.method
    if method == "auto":
        method = "direct" if system.size < DIRECT_SIZE_LIMIT else "cg"
    if method in ("direct", "direct-cholesky"):
        return _direct(system, settings)
    return _cg(system, settings)


def solve(system: SparseSystem, settings: SolverSettings | None = None) -> np.ndarray:
    """Solve A x = b to ||Ax-b|| <= rel_tol ||b||; warns if not reached."""
    result = solve_info(system, settings)
    if not result.converged:
        warnings.warn(
            f"linear solve stalled at relative residual {result.residual:.3e} "
            f"after {result.iterations} iterations",
            NotConverged,
            stacklevel=2,
        )
    return result.x


def factorized_solver(matrix):
    """LU-factorize a sparse matrix once; returns ``solve(rhs) -> x``.

    Used by the transient solvers, which apply the same operator to one
    right-hand side per time step (and per finite-difference probe). The
    symmetric-pattern ordering beats the default on FEM matrices (less
    fill, so both the factorization and every later solve are cheaper).
    """
    return spla.splu(matrix.tocsc(), permc_spec="MMD_AT_PLUS_A").solve
