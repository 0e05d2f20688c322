"""Plain-text mesh files, legacy VTK output and CSV tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import TriMesh, parse_tag, tag_letter

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_mesh(path, mesh: TriMesh) -> None:
    """Vertices, triangles and tagged boundary faces as text.

    The first line reads ``vertices N triangles M boundary K``; the three
    record blocks follow in that order.
    """
    faces, tags = mesh.boundary_records()
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_cells} boundary {len(faces)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [" ".join(map(str, t)) for t in mesh.triangles]
    lines += [f"{a} {b} {tag_letter(t)}" for (a, b), t in zip(faces, tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ValueError("empty mesh file")
    head = rows[0]
    if len(head) != 6 or head[0::2] != ["vertices", "triangles", "boundary"]:
        raise ValueError("mesh header must read 'vertices N triangles M boundary K'")
    nv, nt, nb = (int(x) for x in head[1::2])
    body = rows[1:]
    if len(body) != nv + nt + nb:
        raise ValueError(f"mesh file has {len(body)} records, header announces {nv + nt + nb}")
    verts = np.array([[float(r[0]), float(r[1])] for r in body[:nv]], dtype=float).reshape(-1, 2)
    tris = np.array([[int(x) for x in r[:3]] for r in body[nv:nv + nt]], dtype=np.int64).reshape(-1, 3)
    bnd = body[nv + nt:]
    faces = np.array([[int(r[0]), int(r[1])] for r in bnd], dtype=np.int64).reshape(-1, 2)
    tags = [parse_tag(r[2]) for r in bnd]
    return TriMesh(verts, tris, faces, tags)


def write_vtk(path, mesh: TriMesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "contact solution") -> None:
    """Legacy ASCII unstructured grid with vertex and cell fields.

    Vector point fields of shape ``(n_vertices, 2)`` are written as 3D
    vectors with a zero third component.
    """
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    out.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["5"] * mesh.n_cells

    def section(kind, n, data):
        if not data:
            return
        out.append(f"{kind} {n}")
        for name, values in data.items():
            arr = np.asarray(values, dtype=float)
            if arr.ndim == 2:
                out.append(f"VECTORS {name} double")
                out.extend(f"{a:.17g} {b:.17g} 0" for a, b in arr[:, :2])
            else:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(f"{v:.17g}" for v in arr)

    section("POINT_DATA", mesh.n_vertices, point_data)
    section("CELL_DATA", mesh.n_cells, cell_data)
    Path(path).write_text("\n".join(out) + "\n")


def write_table(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """CSV with a header row; floats carry 17 significant digits."""
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
