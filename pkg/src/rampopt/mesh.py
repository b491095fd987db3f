"""Tetrahedral meshes: Gmsh v2.2 ingestion, parametric generators, P2 promotion.

Meshes are immutable value objects. Connectivity is always stored as P1
(4-node) tetrahedra; quadratic elements are expressed through
``edge_midpoint_index`` so that promoting a mesh never touches the original
nodes or cells.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PatchLabel",
    "BladeSpec",
    "Mesh",
    "MeshError",
    "MalformedFile",
    "UnsupportedVersion",
    "EmptyVolume",
    "UntaggedBoundary",
    "InvalidDimension",
    "DegenerateSector",
    "AlreadyP2",
    "read_gmsh",
    "write_gmsh",
    "generate_box",
    "generate_annular_sector",
    "promote_to_p2",
    "p2_tets",
    "tet_volumes",
    "total_volume",
    "boundary_normals",
    "retag",
    "mesh_info",
]


class MeshError(Exception):
    """Base class for mesh construction and ingestion failures."""


class MalformedFile(MeshError):
    pass


class UnsupportedVersion(MeshError):
    pass


class EmptyVolume(MeshError):
    pass


class UntaggedBoundary(MeshError):
    pass


class InvalidDimension(MeshError):
    pass


class DegenerateSector(MeshError):
    pass


class AlreadyP2(MeshError):
    pass


class PatchLabel(enum.Enum):
    """Semantic role of a boundary patch.

    ROBIN marks convectively heated surfaces. SYM_X / SYM_Y mark the flat
    symmetry cut planes (x = 0 and y = 0 in the quarter-sector analog; the
    normal displacement component is constrained there and the patch is
    thermally insulated). INSULATED carries no heat flux and no mechanical
    constraint.
    """

    ROBIN = "robin"
    SYM_X = "sym_x"
    SYM_Y = "sym_y"
    INSULATED = "insulated"


#: Physical-group integers used by the generators and assumed by default
#: when a file does not come with an explicit mapping.
DEFAULT_TAG_MAP = {
    1: PatchLabel.ROBIN,
    2: PatchLabel.SYM_X,
    3: PatchLabel.SYM_Y,
    4: PatchLabel.INSULATED,
}

#: Physical group assigned to the volume elements when writing files.
VOLUME_TAG = 100

# Local edges of a tetrahedron, in the order used for 10-node connectivity.
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# The six tetrahedra of the Kuhn subdivision of a hexahedron whose corners
# are indexed by (dx, dy, dz) -> 4*dx + 2*dy + dz.  Every tet contains the
# body diagonal 000-111, which makes the split consistent across neighbor
# cells of a structured grid.
_KUHN_TETS = (
    (0, 4, 6, 7),
    (0, 4, 5, 7),
    (0, 2, 6, 7),
    (0, 2, 3, 7),
    (0, 1, 5, 7),
    (0, 1, 3, 7),
)


@dataclass(frozen=True)
class BladeSpec:
    """Radial blade block fused onto the outer rim of a sector mesh.

    The block spans ``theta_cells`` x ``z_cells`` rim faces and extends
    ``height`` meters outward through ``radial_cells`` layers whose
    thickness grows geometrically by ``grading`` away from the root, which
    stands in for the filleted transition of the real part. With ``on_cut``
    the footprint abuts the theta = 0 cut so the block models half a blade
    split by the symmetry plane (the usual cyclic-symmetric idiom);
    otherwise it is centered on the rim.
    """

    height: float
    radial_cells: int = 3
    theta_cells: int = 2
    z_cells: int = 2
    grading: float = 1.5
    on_cut: bool = False


@dataclass(frozen=True)
class Mesh:
    """Immutable tetrahedral mesh with tagged boundary patches.

    nodes            (n, 3) float64 coordinates in meters
    tets             (m, 4) int32 P1 connectivity, positive signed volume
    boundary_tris    (b, 3) int32, outward oriented, each a face of exactly
                     one tetrahedron
    tri_tags         (b,) int32 physical-group id per boundary triangle
    patch_tags       physical-group id -> PatchLabel
    edge_midpoint_index  sorted node pair -> midpoint node index (P2 only)
    num_p1_nodes     vertex count before P2 promotion
    """

    nodes: np.ndarray
    tets: np.ndarray
    boundary_tris: np.ndarray
    tri_tags: np.ndarray
    patch_tags: dict[int, PatchLabel]
    edge_midpoint_index: dict[tuple[int, int], int] = field(default_factory=dict)
    num_p1_nodes: int = -1

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=np.float64))
        tets = np.ascontiguousarray(np.asarray(self.tets, dtype=np.int32))
        tris = np.ascontiguousarray(np.asarray(self.boundary_tris, dtype=np.int32))
        tags = np.ascontiguousarray(np.asarray(self.tri_tags, dtype=np.int32))
        for arr in (nodes, tets, tris, tags):
            arr.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "boundary_tris", tris)
        object.__setattr__(self, "tri_tags", tags)
        if self.num_p1_nodes < 0:
            object.__setattr__(self, "num_p1_nodes", len(nodes))
        self._validate()

    def _validate(self) -> None:
        n = len(self.nodes)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise MalformedFile("tetrahedron references a node index out of range")
        if self.boundary_tris.size and (
            self.boundary_tris.min() < 0 or self.boundary_tris.max() >= n
        ):
            raise MalformedFile("boundary triangle references a node index out of range")
        if len(self.boundary_tris) != len(self.tri_tags):
            raise MalformedFile("every boundary triangle needs exactly one patch tag")
        vols = tet_volumes(self)
        if vols.size and vols.min() <= 0.0:
            raise MalformedFile("non-positive tetrahedron volume after orientation fix")

    @property
    def order(self) -> int:
        return 2 if self.edge_midpoint_index else 1

    def tris_with_label(self, label: PatchLabel) -> np.ndarray:
        """Boundary triangles carrying the given patch label, as an index array."""
        ids = [t for t, lab in self.patch_tags.items() if lab is label]
        if not ids:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(np.isin(self.tri_tags, ids))


def tet_volumes(mesh: Mesh) -> np.ndarray:
    """Signed volumes of all tetrahedra (positive for a valid mesh)."""
    x = mesh.nodes[mesh.tets]
    e = x[:, 1:] - x[:, :1]
    return np.linalg.det(e) / 6.0


def total_volume(mesh: Mesh) -> float:
    return float(tet_volumes(mesh).sum())


def boundary_normals(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Outward unit normals and areas of the boundary triangles."""
    x = mesh.nodes[mesh.boundary_tris]
    cross = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    area2 = np.linalg.norm(cross, axis=1)
    return cross / area2[:, None], 0.5 * area2


def _orient_tets(nodes: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, int]:
    """Swap two vertices of every negative-volume tet; return (tets, n_fixed)."""
    x = nodes[tets]
    vols = np.linalg.det(x[:, 1:] - x[:, :1])
    bad = vols < 0.0
    if bad.any():
        tets = tets.copy()
        tets[bad, 2], tets[bad, 3] = tets[bad, 3], tets[bad, 2].copy()
    return tets, int(bad.sum())


def _tet_faces(tets: np.ndarray) -> np.ndarray:
    """All (4m, 3) faces; face i*4+k is opposite vertex k of tet i, outward oriented."""
    # Outward orientations for positively oriented tets.
    f = np.empty((len(tets), 4, 3), dtype=tets.dtype)
    f[:, 0] = tets[:, [1, 2, 3]]
    f[:, 1] = tets[:, [0, 3, 2]]
    f[:, 2] = tets[:, [0, 1, 3]]
    f[:, 3] = tets[:, [0, 2, 1]]
    return f.reshape(-1, 3)


def _extract_boundary(tets: np.ndarray) -> np.ndarray:
    """Faces of the tet mesh that belong to exactly one tet, outward oriented."""
    faces = _tet_faces(tets)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if counts.max(initial=1) > 2:
        raise MalformedFile("a triangular face is shared by more than two tetrahedra")
    return faces[counts[inverse] == 1]


def _check_boundary_faces(tets: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Every given triangle must be an exterior face of the tet mesh.

    Returns the triangles rewound to the outward orientation, so meshes
    read from files carry the same convention as generated ones.
    """
    if not len(tris):
        return tris
    faces = _tet_faces(tets)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True,
                                   return_counts=True)
    exterior = {
        tuple(k): f for f, k, c in zip(faces, key, counts[inverse]) if c == 1
    }
    out = np.empty_like(tris)
    for i, t in enumerate(np.sort(tris, axis=1)):
        f = exterior.get(tuple(t))
        if f is None:
            raise MalformedFile(
                f"boundary triangle {tuple(int(v) for v in t)} is not an exterior "
                "face of the tetrahedral mesh"
            )
        out[i] = f
    return out


# ---------------------------------------------------------------------------
# Gmsh ASCII v2.2
# ---------------------------------------------------------------------------


def read_gmsh(
    path,
    tag_map: dict[int, PatchLabel] | None = None,
    strict: bool = False,
) -> Mesh:
    """Read a Gmsh ASCII v2.2 file.

    Element type 4 (4-node tet) fills the volume, type 2 (3-node triangle)
    the tagged boundary; the first element tag is the physical group. Other
    element types are ignored. ``tag_map`` translates physical-group
    integers to patch labels (defaults to the generator convention
    1=robin, 2=sym_x, 3=sym_y, 4=insulated). With ``strict`` on, a triangle
    whose group is missing from the map raises UntaggedBoundary; otherwise
    it is kept as INSULATED with a warning.
    """
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise
    pos = 0

    def section(name: str) -> int:
        for i in range(pos, len(lines)):
            if lines[i].strip() == name:
                return i
        raise MalformedFile(f"missing {name} section")

    i = section("$MeshFormat")
    fmt = lines[i + 1].split()
    if not fmt or fmt[0] != "2.2":
        raise UnsupportedVersion(
            f"only Gmsh ASCII v2.2 is supported, file declares {fmt[0] if fmt else '??'}"
        )
    if len(fmt) >= 2 and fmt[1] != "0":
        raise UnsupportedVersion("binary .msh files are not supported")

    pos = i
    i = section("$Nodes")
    try:
        n_nodes = int(lines[i + 1])
        raw = np.array(
            [ln.split() for ln in lines[i + 2 : i + 2 + n_nodes]], dtype=np.float64
        )
    except (ValueError, IndexError) as exc:
        raise MalformedFile(f"cannot parse $Nodes: {exc}") from None
    if raw.shape != (n_nodes, 4):
        raise MalformedFile("wrong node count or node line format in $Nodes")
    ids = raw[:, 0].astype(np.int64)
    if not np.array_equal(ids, np.arange(1, n_nodes + 1)):
        # Gmsh permits sparse ids; remap them to a dense 0-based range.
        order = np.argsort(ids)
        raw = raw[order]
        id_to_row = {int(v): k for k, v in enumerate(raw[:, 0].astype(np.int64))}
    else:
        id_to_row = None
    nodes = raw[:, 1:4].copy()

    pos = i
    i = section("$Elements")
    try:
        n_elems = int(lines[i + 1])
    except (ValueError, IndexError):
        raise MalformedFile("cannot parse $Elements count") from None
    tets, tris, tri_tags = [], [], []
    for ln in lines[i + 2 : i + 2 + n_elems]:
        parts = ln.split()
        if len(parts) < 3:
            raise MalformedFile(f"short element line: {ln!r}")
        etype, ntags = int(parts[1]), int(parts[2])
        tag = int(parts[3]) if ntags >= 1 else 0
        conn = [int(p) for p in parts[3 + ntags :]]
        if etype == 4:
            if len(conn) != 4:
                raise MalformedFile(f"tet with {len(conn)} nodes: {ln!r}")
            tets.append(conn)
        elif etype == 2:
            if len(conn) != 3:
                raise MalformedFile(f"triangle with {len(conn)} nodes: {ln!r}")
            tris.append(conn)
            tri_tags.append(tag)
        # other element types (points, lines, quads, ...) are not used

    if not tets:
        raise EmptyVolume("file contains no tetrahedral elements")
    if not tris:
        raise MalformedFile("file contains no tagged boundary triangles")

    tets_arr = np.asarray(tets, dtype=np.int64)
    tris_arr = np.asarray(tris, dtype=np.int64)
    if id_to_row is not None:
        remap = np.vectorize(id_to_row.__getitem__)
        tets_arr = remap(tets_arr)
        tris_arr = remap(tris_arr)
    else:
        tets_arr -= 1
        tris_arr -= 1

    if tag_map is None:
        tag_map = dict(DEFAULT_TAG_MAP)
    patch_tags = dict(tag_map)
    unknown = sorted(set(tri_tags) - set(patch_tags))
    if unknown:
        if strict:
            raise UntaggedBoundary(
                f"boundary triangles carry unmapped physical groups {unknown}"
            )
        warnings.warn(
            f"physical groups {unknown} have no patch mapping; treating as insulated",
            stacklevel=2,
        )
        for g in unknown:
            patch_tags[g] = PatchLabel.INSULATED

    tets_arr, n_fixed = _orient_tets(nodes, tets_arr.astype(np.int32))
    if n_fixed:
        warnings.warn(
            f"reoriented {n_fixed} negative-volume tetrahedra", stacklevel=2
        )
    tris_arr = _check_boundary_faces(tets_arr, tris_arr)
    return Mesh(
        nodes=nodes,
        tets=tets_arr,
        boundary_tris=tris_arr,
        tri_tags=np.asarray(tri_tags),
        patch_tags=patch_tags,
    )


def write_gmsh(mesh: Mesh, path) -> None:
    """Write the P1 part of a mesh as Gmsh ASCII v2.2."""
    label_to_tag = {lab: tag for tag, lab in mesh.patch_tags.items()}
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    out.append("$PhysicalNames")
    out.append(str(len(label_to_tag) + 1))
    for lab, tag in sorted(label_to_tag.items(), key=lambda kv: kv[1]):
        out.append(f'2 {tag} "{lab.value}"')
    out.append(f'3 {VOLUME_TAG} "solid"')
    out.append("$EndPhysicalNames")
    n = mesh.num_p1_nodes
    out.append("$Nodes")
    out.append(str(n))
    for i, (x, y, z) in enumerate(mesh.nodes[:n], start=1):
        out.append(f"{i} {x:.16g} {y:.16g} {z:.16g}")
    out.append("$EndNodes")
    out.append("$Elements")
    out.append(str(len(mesh.boundary_tris) + len(mesh.tets)))
    eid = 1
    for tri, tag in zip(mesh.boundary_tris, mesh.tri_tags):
        a, b, c = (int(v) + 1 for v in tri)
        out.append(f"{eid} 2 2 {int(tag)} {int(tag)} {a} {b} {c}")
        eid += 1
    for tet in mesh.tets:
        a, b, c, d = (int(v) + 1 for v in tet)
        out.append(f"{eid} 4 2 {VOLUME_TAG} {VOLUME_TAG} {a} {b} {c} {d}")
        eid += 1
    out.append("$EndElements")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Parametric generators
# ---------------------------------------------------------------------------


def generate_box(
    lx: float, ly: float, lz: float, nx: int, ny: int, nz: int
) -> Mesh:
    """Structured box mesh: (nx+1)(ny+1)(nz+1) nodes, 6*nx*ny*nz tets.

    All six faces are tagged ROBIN; use :func:`retag` to change patches.
    """
    if min(lx, ly, lz) <= 0.0:
        raise InvalidDimension("box edge lengths must be positive")
    if min(nx, ny, nz) < 1:
        raise InvalidDimension("subdivision counts must be >= 1")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [
                    nid(i + dx, j + dy, k + dz)
                    for dx in (0, 1)
                    for dy in (0, 1)
                    for dz in (0, 1)
                ]
                for loc in _KUHN_TETS:
                    tets.append([corner[v] for v in loc])
    tets_arr, _ = _orient_tets(nodes, np.asarray(tets, dtype=np.int32))
    tris = _extract_boundary(tets_arr)
    return Mesh(
        nodes=nodes,
        tets=tets_arr,
        boundary_tris=tris,
        tri_tags=np.full(len(tris), 1, dtype=np.int32),
        patch_tags={1: PatchLabel.ROBIN},
    )


_SECTOR_PRESETS = {
    "smoke": (3, 5, 3),
    "coarse": (4, 6, 4),
    "demo": (10, 17, 7),
}


def generate_annular_sector(
    r_inner: float,
    r_outer: float,
    z_len: float,
    angle: float,
    blade: BladeSpec | None = None,
    resolution="coarse",
) -> Mesh:
    """Sector of an annulus (or solid cylinder for r_inner = 0) about z.

    The sector spans theta in [0, angle]. Cut faces are tagged SYM_Y
    (theta = 0, the y = 0 plane) and SYM_X (theta = angle); the outer rim
    and any blade surface are ROBIN; end faces and the bore are INSULATED.
    ``resolution`` is a preset name ('smoke', 'coarse', 'demo') or an
    explicit (n_radial, n_theta, n_z) tuple. An optional blade block is
    fused rim-conformally, with radial grading standing in for the fillet.
    """
    if r_inner < 0.0 or r_outer <= r_inner or z_len <= 0.0:
        raise InvalidDimension("need 0 <= r_inner < r_outer and z_len > 0")
    if not 0.0 < angle <= 2.0 * np.pi + 1e-12:
        raise DegenerateSector("sector angle must lie in (0, 2*pi]")
    if isinstance(resolution, str):
        try:
            nr, nt, nz = _SECTOR_PRESETS[resolution]
        except KeyError:
            raise InvalidDimension(
                f"unknown resolution preset {resolution!r}; "
                f"use one of {sorted(_SECTOR_PRESETS)} or an (nr, nt, nz) tuple"
            ) from None
    else:
        nr, nt, nz = (int(v) for v in resolution)
    if min(nr, nt, nz) < 1:
        raise InvalidDimension("subdivision counts must be >= 1")

    full_ring = abs(angle - 2.0 * np.pi) < 1e-12
    solid_core = r_inner == 0.0

    rs = np.linspace(r_inner, r_outer, nr + 1)
    ts = np.linspace(0.0, angle, nt + 1)
    zs = np.linspace(0.0, z_len, nz + 1)

    nodes: list[tuple[float, float, float]] = []
    index: dict[tuple[int, int, int], int] = {}

    def nid(ir: int, it: int, iz: int) -> int:
        if full_ring and it == nt:
            it = 0
        if solid_core and ir == 0:
            it = 0
        key = (ir, it, iz)
        if key not in index:
            r, t = rs[ir], ts[it]
            index[key] = len(nodes)
            nodes.append((r * np.cos(t), r * np.sin(t), zs[iz]))
        return index[key]

    tets: list[list[int]] = []

    def add_hex(c000, c100, c010, c110, c001, c101, c011, c111):
        corner = (c000, c100, c010, c110, c001, c101, c011, c111)
        for loc in _KUHN_TETS:
            t = [corner[v] for v in loc]
            if len(set(t)) == 4:  # collapsed cells shed degenerate tets
                tets.append(t)

    for ir in range(nr):
        for it in range(nt):
            for iz in range(nz):
                add_hex(
                    nid(ir, it, iz),
                    nid(ir + 1, it, iz),
                    nid(ir, it + 1, iz),
                    nid(ir + 1, it + 1, iz),
                    nid(ir, it, iz + 1),
                    nid(ir + 1, it, iz + 1),
                    nid(ir, it + 1, iz + 1),
                    nid(ir + 1, it + 1, iz + 1),
                )

    blade_nodes: dict[tuple[int, int, int], int] = {}
    if blade is not None:
        if blade.height <= 0.0 or blade.radial_cells < 1:
            raise InvalidDimension("blade height and radial_cells must be positive")
        if blade.theta_cells > nt or blade.z_cells > nz:
            raise InvalidDimension("blade footprint exceeds the rim grid")
        it0 = 0 if blade.on_cut else (nt - blade.theta_cells) // 2
        iz0 = (nz - blade.z_cells) // 2
        # Geometric layer thicknesses, finest at the root.
        g = max(blade.grading, 1.0)
        w = g ** np.arange(blade.radial_cells)
        radii = r_outer + blade.height * np.concatenate([[0.0], np.cumsum(w)]) / w.sum()

        def bid(jr: int, it: int, iz: int) -> int:
            if jr == 0:
                return nid(nr, it, iz)
            key = (jr, it, iz)
            if key not in blade_nodes:
                r, t = radii[jr], ts[it]
                blade_nodes[key] = len(nodes)
                nodes.append((r * np.cos(t), r * np.sin(t), zs[iz]))
            return blade_nodes[key]

        for jr in range(blade.radial_cells):
            for it in range(it0, it0 + blade.theta_cells):
                for iz in range(iz0, iz0 + blade.z_cells):
                    add_hex(
                        bid(jr, it, iz),
                        bid(jr + 1, it, iz),
                        bid(jr, it + 1, iz),
                        bid(jr + 1, it + 1, iz),
                        bid(jr, it, iz + 1),
                        bid(jr + 1, it, iz + 1),
                        bid(jr, it + 1, iz + 1),
                        bid(jr + 1, it + 1, iz + 1),
                    )

    nodes_arr = np.asarray(nodes, dtype=np.float64)
    tets_arr, _ = _orient_tets(nodes_arr, np.asarray(tets, dtype=np.int32))
    tris = _extract_boundary(tets_arr)

    # Classify boundary faces geometrically.
    centroids = nodes_arr[tris].mean(axis=1)
    cross = np.cross(
        nodes_arr[tris[:, 1]] - nodes_arr[tris[:, 0]],
        nodes_arr[tris[:, 2]] - nodes_arr[tris[:, 0]],
    )
    normals = cross / np.linalg.norm(cross, axis=1)[:, None]
    tol = 1e-9 * max(r_outer, z_len)
    cut_n = np.array([-np.sin(angle), np.cos(angle), 0.0])  # normal of theta=angle plane

    tags = np.empty(len(tris), dtype=np.int32)
    label_ids = {lab: tag for tag, lab in DEFAULT_TAG_MAP.items()}
    for i, (c, n) in enumerate(zip(centroids, normals)):
        if abs(abs(n[2]) - 1.0) < 1e-9 and (abs(c[2]) < tol or abs(c[2] - z_len) < tol):
            lab = PatchLabel.INSULATED
        elif not full_ring and abs(c[1]) < tol and abs(abs(n[1]) - 1.0) < 1e-9:
            lab = PatchLabel.SYM_Y
        elif not full_ring and abs(abs(n @ cut_n) - 1.0) < 1e-9 and abs(c @ cut_n) < tol:
            lab = PatchLabel.SYM_X
        elif r_inner > 0.0 and abs(np.hypot(c[0], c[1]) - r_inner) < 0.49 * (
            rs[1] - rs[0]
        ):
            lab = PatchLabel.INSULATED
        else:
            lab = PatchLabel.ROBIN
        tags[i] = label_ids[lab]

    return Mesh(
        nodes=nodes_arr,
        tets=tets_arr,
        boundary_tris=tris,
        tri_tags=tags,
        patch_tags=dict(DEFAULT_TAG_MAP),
    )


def retag(mesh: Mesh, selector) -> Mesh:
    """Return a mesh with boundary labels rewritten by a selector.

    ``selector(tri_index, centroid, outward_normal)`` returns a PatchLabel
    or None to keep the triangle's current tag.
    """
    normals, _ = boundary_normals(mesh)
    centroids = mesh.nodes[mesh.boundary_tris].mean(axis=1)
    label_ids = {lab: tag for tag, lab in DEFAULT_TAG_MAP.items()}
    tags = mesh.tri_tags.copy()
    for i in range(len(tags)):
        lab = selector(i, centroids[i], normals[i])
        if lab is not None:
            tags[i] = label_ids[lab]
    patch_tags = dict(mesh.patch_tags)
    patch_tags.update(DEFAULT_TAG_MAP)
    return Mesh(
        nodes=mesh.nodes,
        tets=mesh.tets,
        boundary_tris=mesh.boundary_tris,
        tri_tags=tags,
        patch_tags=patch_tags,
        edge_midpoint_index=dict(mesh.edge_midpoint_index),
        num_p1_nodes=mesh.num_p1_nodes,
    )


# ---------------------------------------------------------------------------
# P2 promotion
# ---------------------------------------------------------------------------


def promote_to_p2(mesh: Mesh) -> Mesh:
    """Add one midpoint node per unique edge; original nodes keep their indices."""
    if mesh.edge_midpoint_index:
        raise AlreadyP2("mesh already carries edge midpoints")
    pairs = mesh.tets[:, TET_EDGES].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)
    mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    emi = {
        (int(a), int(b)): mesh.num_p1_nodes + k
        for k, (a, b) in enumerate(edges)
    }
    return Mesh(
        nodes=np.vstack([mesh.nodes, mids]),
        tets=mesh.tets,
        boundary_tris=mesh.boundary_tris,
        tri_tags=mesh.tri_tags,
        patch_tags=dict(mesh.patch_tags),
        edge_midpoint_index=emi,
        num_p1_nodes=mesh.num_p1_nodes,
    )


def p2_tets(mesh: Mesh) -> np.ndarray:
    """(m, 10) connectivity: 4 vertices then midpoints of TET_EDGES order."""
    if not mesh.edge_midpoint_index:
        raise ValueError("mesh has no edge midpoints; call promote_to_p2 first")
    out = np.empty((len(mesh.tets), 10), dtype=np.int64)
    out[:, :4] = mesh.tets
    emi = mesh.edge_midpoint_index
    for col, (a, b) in enumerate(TET_EDGES):
        for e, tet in enumerate(mesh.tets):
            i, j = int(tet[a]), int(tet[b])
            out[e, 4 + col] = emi[(i, j) if i < j else (j, i)]
    return out


def boundary_nodes(mesh: Mesh, label: PatchLabel | None = None) -> np.ndarray:
    """Node indices on the boundary (or on one patch), midpoints included.

    For a P2 mesh the midpoint of every edge of a selected boundary
    triangle is part of that boundary.
    """
    idx = (
        np.arange(len(mesh.boundary_tris))
        if label is None
        else mesh.tris_with_label(label)
    )
    tris = mesh.boundary_tris[idx]
    nodes = set(int(v) for v in tris.ravel())
    if mesh.edge_midpoint_index:
        emi = mesh.edge_midpoint_index
        for tri in tris:
            for a, b in ((0, 1), (1, 2), (0, 2)):
                i, j = int(tri[a]), int(tri[b])
                nodes.add(emi[(i, j) if i < j else (j, i)])
    return np.fromiter(sorted(nodes), dtype=np.int64)


def mesh_info(mesh: Mesh) -> str:
    """Human-readable statistics block used by the CLI."""
    counts: dict[str, int] = {}
    for tag in mesh.tri_tags:
        lab = mesh.patch_tags[int(tag)].value
        counts[lab] = counts.get(lab, 0) + 1
    lines = [
        f"nodes          : {len(mesh.nodes)}",
        f"p1 nodes       : {mesh.num_p1_nodes}",
        f"order          : {mesh.order}",
        f"tetrahedra     : {len(mesh.tets)}",
        f"boundary tris  : {len(mesh.boundary_tris)}",
        f"volume [m^3]   : {total_volume(mesh):.9g}",
    ]
    for lab in sorted(counts):
        lines.append(f"patch {lab:<9}: {counts[lab]} tris")
    return "\n".join(lines)
