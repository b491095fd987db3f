"""Lagrange P1/P2 tetrahedral finite elements and sparse-system assembly.

Assembles the backward-Euler heat step and the quasi-static thermoelastic
equilibrium into symmetric sparse systems. Temperature lives on the P1
vertices, displacement on the full P2 node set (vertices plus edge
midpoints). All physics is carried in SI units (Pa, kg, m, s) with
temperatures in degrees C; only temperature differences enter any formula,
so the Celsius offset never matters.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import Mesh, PatchLabel, boundary_nodes, p2_tets

__all__ = [
    "MaterialProperties",
    "QuadratureRule",
    "SparseSystem",
    "InvalidPoint",
    "NonpositiveDt",
    "MissingTemperatureField",
    "EmptyRobinPatch",
    "tet_rule",
    "tri_rule",
    "shape_eval",
    "heat_operators",
    "assemble_heat",
    "elasticity_operators",
    "assemble_elasticity",
    "apply_dirichlet",
    "apply_symmetry",
    "symmetry_dofs",
    "centrifugal_load_density",
]


class InvalidPoint(ValueError):
    pass


class NonpositiveDt(ValueError):
    pass


class MissingTemperatureField(ValueError):
    pass


class EmptyRobinPatch(UserWarning):
    """No Robin-labeled boundary: the temperature field cannot evolve."""


@dataclass(frozen=True)
class MaterialProperties:
    """Isotropic thermoelastic material constants.

    Defaults are the steel-like values used throughout the demo problem.
    ``lam`` and ``mu`` are derived from (E, nu) and must not be set directly.
    """

    E: float = 210e9          # Young's modulus [Pa]
    nu: float = 0.3           # Poisson ratio
    rho: float = 8050.0       # density [kg/m^3]
    alpha: float = 13.5e-6    # thermal expansion [1/K]
    c_p: float = 420.0        # specific heat [J/(kg K)]
    k: float = 36.0           # conductivity [W/(m K)]
    h: float = 20.0           # convection coefficient [W/(m^2 K)]
    T0: float = 0.0           # stress-free reference temperature [degC]
    lam: float = field(init=False)
    mu: float = field(init=False)

    def __post_init__(self) -> None:
        if self.E <= 0 or not 0.0 < self.nu < 0.5:
            raise ValueError("need E > 0 and 0 < nu < 0.5")
        if min(self.rho, self.c_p, self.k, self.h, self.alpha) <= 0:
            raise ValueError("rho, c_p, k, h, alpha must all be positive")
        object.__setattr__(
            self, "lam", self.nu * self.E / ((1 + self.nu) * (1 - 2 * self.nu))
        )
        object.__setattr__(self, "mu", self.E / (2 * (1 + self.nu)))

    @property
    def beta(self) -> float:
        """Thermal stress modulus alpha*(3*lambda + 2*mu) [Pa/K]."""
        return self.alpha * (3.0 * self.lam + 2.0 * self.mu)


@dataclass(frozen=True)
class SparseSystem:
    """A symmetric sparse linear system A x = b.

    ``dof_map[node, component]`` gives the global row of a nodal unknown;
    temperature systems have a single component, displacement three.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def max_asymmetry(self) -> float:
        d = self.matrix - self.matrix.T
        denom = np.abs(self.matrix.data).max() if self.matrix.nnz else 1.0
        num = np.abs(d.data).max() if d.nnz else 0.0
        return float(num / denom)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates with reference-domain weights."""

    points: np.ndarray   # (nq, 4) tet or (nq, 3) triangle
    weights: np.ndarray  # sums to 1/6 (tet) or 1/2 (triangle)
    degree: int          # every polynomial up to this total degree is exact


def _gauss01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss points/weights for int_0^1 f(t) (1-t)^alpha dt."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w * 0.5 ** (alpha + 1)


def tet_rule(degree: int) -> QuadratureRule:
    """Conical-product rule on the reference tetrahedron.

    Built from Gauss-Jacobi lines through the collapsed-coordinate map, so
    an n-point line gives exactness for total degree 2n-1 >= ``degree``.
    """
    n = (degree + 2) // 2
    u, wu = _gauss01(n, 2)
    v, wv = _gauss01(n, 1)
    t, wt = _gauss01(n, 0)
    pts, wts = [], []
    for iu in range(n):
        for iv in range(n):
            for it in range(n):
                x = u[iu]
                y = v[iv] * (1.0 - u[iu])
                z = t[it] * (1.0 - u[iu]) * (1.0 - v[iv])
                pts.append((1.0 - x - y - z, x, y, z))
                wts.append(wu[iu] * wv[iv] * wt[it])
    return QuadratureRule(np.array(pts), np.array(wts), 2 * n - 1)


def tri_rule(degree: int = 2) -> QuadratureRule:
    """Three-point degree-2 rule on the reference triangle."""
    if degree > 2:
        raise ValueError("only the degree-2 surface rule is provided")
    a, b = 2.0 / 3.0, 1.0 / 6.0
    pts = np.array([[a, b, b], [b, a, b], [b, b, a]])
    return QuadratureRule(pts, np.full(3, 1.0 / 6.0), 2)


# ---------------------------------------------------------------------------
# Shape functions
# ---------------------------------------------------------------------------


def shape_eval(order: int, point) -> tuple[np.ndarray, np.ndarray]:
    """Values and reference gradients of all tet basis functions at a point.

    ``point`` is barycentric (lam0..lam3, nonnegative, summing to 1);
    gradients are taken with respect to the reference coordinates
    (lam1, lam2, lam3). Returns (values (n,), gradients (n, 3)) with
    n = 4 for order 1 and n = 10 for order 2 (vertices first, then edge
    midpoints in the (0,1),(0,2),(0,3),(1,2),(1,3),(2,3) order).
    """
    lam = np.asarray(point, dtype=np.float64)
    if lam.shape != (4,) or lam.min() < -1e-12 or abs(lam.sum() - 1.0) > 1e-12:
        raise InvalidPoint(f"not a barycentric tet point: {point!r}")
    # gradients of the barycentric coordinates in reference coords
    dlam = np.array(
        [[-1.0, -1.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    if order == 1:
        return lam.copy(), dlam.copy()
    if order != 2:
        raise ValueError("order must be 1 or 2")
    vals = np.empty(10)
    grads = np.empty((10, 3))
    for i in range(4):
        vals[i] = lam[i] * (2.0 * lam[i] - 1.0)
        grads[i] = (4.0 * lam[i] - 1.0) * dlam[i]
    edges = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
    for e, (a, b) in enumerate(edges):
        vals[4 + e] = 4.0 * lam[a] * lam[b]
        grads[4 + e] = 4.0 * (lam[a] * dlam[b] + lam[b] * dlam[a])
    return vals, grads


def _tabulate(order: int, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Basis values (nq, n) and reference gradients (nq, n, 3) at rule points."""
    vals, grads = [], []
    for p in rule.points:
        v, g = shape_eval(order, p)
        vals.append(v)
        grads.append(g)
    return np.array(vals), np.array(grads)


def _element_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-element inverse edge matrices (m,3,3) and |det| (m,) = 6V."""
    x = mesh.nodes[mesh.tets]
    edge = x[:, 1:] - x[:, :1]          # rows are edge vectors
    det = np.linalg.det(edge)
    return np.linalg.inv(edge), det


def _accumulate(rows, cols, vals, shape) -> sp.csr_matrix:
    a = sp.coo_matrix(
        (np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape
    ).tocsr()
    a.sum_duplicates()
    return a


# ---------------------------------------------------------------------------
# Heat operators (P1)
# ---------------------------------------------------------------------------


def heat_operators(
    mesh: Mesh, mat: MaterialProperties
) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Assemble (M, K, S, w): capacity and conduction volume matrices, the
    Robin surface matrix and the Robin surface load vector (both already
    scaled by h, so the step RHS contribution is T_e * w)."""
    n = mesh.num_p1_nodes
    rule = tet_rule(2)
    vals, rgrads = _tabulate(1, rule)
    inv_edge, det = _element_geometry(mesh)
    # physical gradients per element: constant for P1, per-qpoint kept generic
    g = np.einsum("eij,aj->eai", inv_edge, rgrads[0])   # (m, 4, 3)

    me = np.einsum("q,qa,qb->ab", rule.weights, vals, vals)
    Me = mat.rho * mat.c_p * det[:, None, None] * me[None, :, :]
    Ke = mat.k * det[:, None, None] * np.einsum("eak,ebk->eab", g, g) * (1.0 / 6.0)

    t = mesh.tets
    rows = np.repeat(t, 4, axis=1)
    cols = np.tile(t, (1, 4))
    M = _accumulate(rows, cols, Me, (n, n))
    K = _accumulate(rows, cols, Ke, (n, n))

    robin = mesh.tris_with_label(PatchLabel.ROBIN)
    if len(robin) == 0:
        warnings.warn(
            "mesh has no Robin-labeled boundary; the temperature stays at its "
            "initial state",
            EmptyRobinPatch,
            stacklevel=2,
        )
        return M, K, sp.csr_matrix((n, n)), np.zeros(n)

    tris = mesh.boundary_tris[robin]
    x = mesh.nodes[tris]
    area = 0.5 * np.linalg.norm(
        np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1
    )
    srule = tri_rule(2)
    sv = srule.points  # P1 triangle basis values are the barycentric coords
    se = np.einsum("q,qa,qb->ab", srule.weights, sv, sv)
    Se = mat.h * 2.0 * area[:, None, None] * se[None, :, :]
    S = _accumulate(
        np.repeat(tris, 3, axis=1), np.tile(tris, (1, 3)), Se, (n, n)
    )
    we = mat.h * 2.0 * area[:, None] * np.einsum("q,qa->a", srule.weights, sv)
    w = np.zeros(n)
    np.add.at(w, tris.ravel(), we.ravel())
    return M, K, S, w


def assemble_heat(
    mesh: Mesh,
    mat: MaterialProperties,
    dt: float,
    T_prev: np.ndarray,
    T_e: float,
) -> SparseSystem:
    """One implicit-Euler heat step: (M/dt + K + S) T = M/dt T_prev + T_e w.

    The solution of the returned system is the temperature at the end of
    the step. Only Robin-labeled patches exchange heat; symmetry and
    insulated patches are natural (zero-flux) boundaries.
    """
    if dt <= 0.0:
        raise NonpositiveDt(f"dt must be positive, got {dt}")
    T_prev = np.asarray(T_prev, dtype=np.float64)
    if T_prev.shape != (mesh.num_p1_nodes,):
        raise MissingTemperatureField(
            f"T_prev must have one value per P1 node ({mesh.num_p1_nodes})"
        )
    M, K, S, w = heat_operators(mesh, mat)
    A = (M / dt + K + S).tocsr()
    b = M @ T_prev / dt + T_e * w
    dof_map = np.arange(mesh.num_p1_nodes, dtype=np.int64)[:, None]
    return SparseSystem(A, b, dof_map)


# ---------------------------------------------------------------------------
# Elasticity operators (P2)
# ---------------------------------------------------------------------------


def centrifugal_load_density(rho: float, omega: float, point) -> np.ndarray:
    """Centrifugal body-force density rho*omega^2*(x, y, 0) [N/m^3]."""
    x = np.asarray(point, dtype=np.float64)
    return rho * omega**2 * np.array([x[0], x[1], 0.0])


def elasticity_operators(
    mesh: Mesh, mat: MaterialProperties, chunk: int = 2048
) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Assemble (K, C, f_rot) for quasi-static thermoelasticity on P2 nodes.

    K is the 3n x 3n stiffness; C maps P1 nodal temperature offsets
    (T - T0) to the thermal load vector; f_rot is the centrifugal load for
    omega = 1 rad/s, so the full RHS is C (T - T0) + omega^2 f_rot.
    """
    if mesh.order != 2:
        raise ValueError("elasticity needs a P2 mesh; call promote_to_p2 first")
    conn = p2_tets(mesh)                       # (m, 10)
    nn = len(mesh.nodes)
    ndof = 3 * nn
    rule = tet_rule(4)
    vals, rgrads = _tabulate(2, rule)          # (nq,10), (nq,10,3)
    p1_vals = np.array([shape_eval(1, p)[0] for p in rule.points])  # (nq,4)
    inv_edge, det = _element_geometry(mesh)
    verts = mesh.nodes[mesh.tets]              # (m,4,3)
    eye = np.eye(3)

    dofs = (3 * conn[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 30)
    k_rows = np.repeat(dofs, 30, axis=1)
    k_cols = np.tile(dofs, (1, 30))
    c_cols_base = mesh.tets                    # (m,4)

    K_parts, C_parts = [], []
    f_rot = np.zeros(ndof)
    m = len(conn)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        ie, dd = inv_edge[lo:hi], det[lo:hi]
        Ke = np.zeros((hi - lo, 10, 3, 10, 3))
        Ce = np.zeros((hi - lo, 10, 3, 4))
        fe = np.zeros((hi - lo, 10, 3))
        for q, wq in enumerate(rule.weights):
            g = np.einsum("eij,aj->eai", ie, rgrads[q])        # (e,10,3)
            scale = wq * dd
            dot = np.einsum("eak,ebk->eab", g, g)
            Ke += scale[:, None, None, None, None] * (
                mat.mu * np.einsum("eab,ij->eaibj", dot, eye)
                + mat.mu * np.einsum("eaj,ebi->eaibj", g, g)
                + mat.lam * np.einsum("eai,ebj->eaibj", g, g)
            )
            Ce += (mat.beta * scale)[:, None, None, None] * np.einsum(
                "eai,c->eaic", g, p1_vals[q]
            )
            xq = np.einsum("c,ecj->ej", p1_vals[q], verts[lo:hi])
            xq[:, 2] = 0.0
            fe += (mat.rho * scale)[:, None, None] * np.einsum(
                "ej,a->eaj", xq, vals[q]
            )
        K_parts.append(
            _accumulate(k_rows[lo:hi], k_cols[lo:hi], Ke.reshape(hi - lo, 900),
                        (ndof, ndof))
        )
        # Ce laid out (e, a, i, c): rows run over (a,i) with c fastest
        crows = np.repeat(dofs[lo:hi], 4, axis=1)
        ccols = np.tile(c_cols_base[lo:hi], (1, 30))
        C_parts.append(
            _accumulate(crows, ccols, Ce.reshape(hi - lo, 120),
                        (ndof, mesh.num_p1_nodes))
        )
        np.add.at(f_rot, dofs[lo:hi].ravel(), fe.reshape(hi - lo, 30).ravel())

    K = K_parts[0]
    for part in K_parts[1:]:
        K = K + part
    C = C_parts[0]
    for part in C_parts[1:]:
        C = C + part
    return K.tocsr(), C.tocsr(), f_rot


def assemble_elasticity(
    mesh: Mesh,
    mat: MaterialProperties,
    T: np.ndarray,
    omega: float,
    symmetry: bool = True,
    operators=None,
) -> SparseSystem:
    """Quasi-static thermoelastic equilibrium at one time instant.

    ``T`` is the P1 nodal temperature field, ``omega`` the rotation speed
    in rad/s. Pass precomputed ``operators`` (from
    :func:`elasticity_operators`) to amortize assembly over many steps.
    Symmetry constraints are applied unless ``symmetry`` is False.
    """
    if T is None:
        raise MissingTemperatureField("temperature field is required")
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (mesh.num_p1_nodes,):
        raise MissingTemperatureField(
            f"T must have one value per P1 node ({mesh.num_p1_nodes})"
        )
    if omega < 0.0:
        raise ValueError("omega must be nonnegative")
    K, C, f_rot = elasticity_operators(mesh, mat) if operators is None else operators
    b = C @ (T - mat.T0) + omega**2 * f_rot
    nn = len(mesh.nodes)
    dof_map = (3 * np.arange(nn, dtype=np.int64)[:, None]
               + np.arange(3, dtype=np.int64)[None, :])
    system = SparseSystem(K, b, dof_map)
    if symmetry:
        system = apply_symmetry(system, mesh)
    return system


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


def apply_dirichlet(
    system: SparseSystem, dofs: np.ndarray, values: np.ndarray
) -> SparseSystem:
    """Eliminate prescribed DOFs symmetrically.

    Constrained rows and columns are zeroed, the diagonal is set to 1 and
    the RHS carries the prescribed value, with the column contribution
    moved to the RHS first so the reduced system stays consistent and SPD.
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if len(dofs) == 0:
        return system
    n = system.size
    xp = np.zeros(n)
    xp[dofs] = values
    b = system.rhs - system.matrix @ xp
    keep = np.ones(n)
    keep[dofs] = 0.0
    Z = sp.diags(keep)
    D = sp.diags(1.0 - keep)
    A = (Z @ system.matrix @ Z + D).tocsr()
    b = keep * b
    b[dofs] = values
    return SparseSystem(A, b, system.dof_map)


def symmetry_dofs(mesh: Mesh) -> np.ndarray:
    """Displacement DOFs constrained by the symmetry patches.

    For each SYM_X / SYM_Y patch the component along the patch normal is
    fixed to zero at every P2 node of the patch (vertices and edge
    midpoints). Patches must be axis-aligned planes; the sector generator
    only emits such patches for quarter-symmetric geometry.
    """
    out: set[int] = set()
    for label in (PatchLabel.SYM_X, PatchLabel.SYM_Y):
        idx = mesh.tris_with_label(label)
        if len(idx) == 0:
            continue
        tris = mesh.boundary_tris[idx]
        x = mesh.nodes[tris]
        normals = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        avg = np.mean(np.abs(normals), axis=0)
        comp = int(np.argmax(avg))
        off_plane = np.abs(np.abs(normals[:, comp]) - 1.0).max()
        if off_plane > 1e-6:
            raise ValueError(
                f"symmetry patch {label.value} is not an axis-aligned plane "
                f"(normal deviation {off_plane:.2e}); cannot constrain a "
                "single displacement component"
            )
        out.update(3 * int(v) + comp for v in boundary_nodes(mesh, label))
    return np.fromiter(sorted(out), dtype=np.int64)


def apply_symmetry(system: SparseSystem, mesh: Mesh) -> SparseSystem:
    """Constrain the normal displacement component on symmetry patches.

    Without symmetry patches the system is returned unchanged.
    """
    dofs = symmetry_dofs(mesh)
    if len(dofs) == 0:
        return system
    return apply_dirichlet(system, dofs, np.zeros(len(dofs)))
