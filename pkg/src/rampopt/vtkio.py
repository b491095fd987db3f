"""Legacy ASCII VTK output for the per-step temperature, displacement and
von Mises fields (unstructured tetrahedral grid, point data).

The legacy format is verbose but universally readable; fields land on the
P1 vertex set with linear cells, which every viewer renders without
higher-order support.
"""
from __future__ import annotations

import numpy as np

__all__ = ["write_vtk", "read_vtk"]


def write_vtk(path, points: np.ndarray, cells: np.ndarray,
              point_data: dict[str, np.ndarray],
              title: str = "thermomechanical fields") -> None:
    """Write one unstructured grid with named point fields.

    ``points`` is (n, 3), ``cells`` (m, 4) vertex indices. Each entry of
    ``point_data`` is (n,) for a scalar field or (n, 3) for a vector.
    """
    points = np.asarray(points, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    n = len(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must be (n, 3)")
    if cells.ndim != 2 or cells.shape[1] != 4:
        raise ValueError("cells must be (m, 4) tetrahedra")
    if cells.size and (cells.min() < 0 or cells.max() >= n):
        raise ValueError("cell connectivity references missing points")
    for name, values in point_data.items():
        arr = np.asarray(values)
        if len(arr) != n or arr.ndim not in (1, 2):
            raise ValueError(f"field {name!r} does not match the point set")
        if arr.ndim == 2 and arr.shape[1] != 3:
            raise ValueError(f"vector field {name!r} must be (n, 3)")
        if " " in name:
            raise ValueError(f"field name {name!r} must not contain spaces")

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        np.savetxt(fh, points, fmt="%.12g")
        fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
        np.savetxt(
            fh,
            np.hstack([np.full((len(cells), 1), 4, dtype=np.int64), cells]),
            fmt="%d",
        )
        fh.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(fh, np.full(len(cells), 10, dtype=np.int64), fmt="%d")
        fh.write(f"POINT_DATA {n}\n")
        for name, values in point_data.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim == 1:
                fh.write(f"SCALARS {name} double 1\n")
                fh.write("LOOKUP_TABLE default\n")
                np.savetxt(fh, arr, fmt="%.12g")
            else:
                fh.write(f"VECTORS {name} double\n")
                np.savetxt(fh, arr, fmt="%.12g")


def read_vtk(path):
    """Read back a file produced by :func:`write_vtk`.

    Returns (points, cells, point_data). Supports exactly the subset the
    writer emits — enough for round-trip checks and downstream scripts.
    """
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    idx = 0

    def expect(prefix):
        nonlocal idx
        while not lines[idx].strip():
            idx += 1
        if not lines[idx].startswith(prefix):
            raise ValueError(
                f"expected {prefix!r} at line {idx + 1}, got {lines[idx]!r}")
        row = lines[idx].split()
        idx += 1
        return row

    def block(count, width):
        nonlocal idx
        flat: list[float] = []
        while len(flat) < count * width:
            flat.extend(float(tok) for tok in lines[idx].split())
            idx += 1
        return np.array(flat).reshape(count, width)

    expect("# vtk DataFile")
    idx += 1  # title
    expect("ASCII")
    expect("DATASET UNSTRUCTURED_GRID")
    n = int(expect("POINTS")[1])
    points = block(n, 3)
    m = int(expect("CELLS")[1])
    cells = block(m, 5).astype(np.int64)[:, 1:]
    expect("CELL_TYPES")
    block(m, 1)
    expect("POINT_DATA")
    data: dict[str, np.ndarray] = {}
    while idx < len(lines):
        if not lines[idx].strip():
            idx += 1
            continue
        row = lines[idx].split()
        idx += 1
        if row[0] == "SCALARS":
            expect("LOOKUP_TABLE")
            data[row[1]] = block(n, 1).ravel()
        elif row[0] == "VECTORS":
            data[row[1]] = block(n, 3)
        else:
            raise ValueError(f"unsupported attribute {row[0]!r}")
    return points, cells, data
