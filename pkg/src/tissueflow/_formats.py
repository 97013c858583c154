"""Bit-stable file formats: CSV artifacts and legacy ASCII VTK meshes.

Every float is rendered with "%.17g", which round-trips IEEE doubles
exactly, and nothing run-dependent (timestamps, hostnames) is ever written,
so rerunning a pipeline with the same config produces byte-identical files.
CSV records follow RFC 4180 (comma separator, CRLF); header comments are
'#'-prefixed lines before the records.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = [
    "format_double",
    "write_tensor_csv",
    "read_tensor_csv",
    "write_table_csv",
    "read_table_csv",
    "write_vtk_mesh",
]

_EOL = "\r\n"


def format_double(x) -> str:
    return "%.17g" % float(x)


def write_tensor_csv(path, name: str, tensor, comments=()) -> None:
    """d x d (or general 2D) tensor as one CSV record per row, preceded by
    '#' comment lines naming the tensor and its shape."""
    a = np.atleast_2d(np.asarray(tensor, dtype=float))
    lines = [f"# tensor: {name}", f"# shape: {a.shape[0]} {a.shape[1]}"]
    lines += [f"# {c}" for c in comments]
    lines += [",".join(format_double(v) for v in row) for row in a]
    with open(path, "w", newline="") as f:
        f.write(_EOL.join(lines) + _EOL)


def read_tensor_csv(path):
    """Inverse of write_tensor_csv: returns (name, array). Exact for every
    finite double."""
    name = None
    rows = []
    with open(path, newline="") as f:
        for raw in f:
            line = raw.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("tensor:"):
                    name = body.split(":", 1)[1].strip()
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ValidationError(f"no tensor records in {path}")
    return name, np.asarray(rows, dtype=float)


def write_table_csv(path, columns, rows, comments=()) -> None:
    """Scalar log: one header record with column names, then data records.
    Cell values may be floats (rendered %.17g), ints, or strings."""
    def render(v):
        if isinstance(v, str):
            return v
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return format_double(v)

    lines = [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    lines += [",".join(render(v) for v in row) for row in rows]
    with open(path, "w", newline="") as f:
        f.write(_EOL.join(lines) + _EOL)


def read_table_csv(path):
    """Returns (columns, list of row tuples); numeric fields parsed as float
    when possible, left as strings otherwise."""
    columns = None
    rows = []
    with open(path, newline="") as f:
        for raw in f:
            line = raw.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if columns is None:
                columns = parts
                continue
            row = []
            for v in parts:
                try:
                    row.append(float(v))
                except ValueError:
                    row.append(v)
            rows.append(tuple(row))
    if columns is None:
        raise ValidationError(f"no header record in {path}")
    return columns, rows


def write_vtk_mesh(path, mesh, point_data=None, cell_data=None, title="tissueflow"):
    """Legacy ASCII VTK 3.0 unstructured grid.

    Triangles come first, then tagged facets as line cells, so one grid
    carries both integer cell-data arrays: "subdomain" (triangle tag, -1 on
    lines) and "facet_tag" (facet tag, -1 on triangles). `point_data` maps
    name -> (n_vertices,) scalars or (n_vertices, 2) vectors; `cell_data`
    maps name -> per-TRIANGLE scalars (padded with zeros on line cells).
    """
    verts = mesh.vertices
    tris = mesh.cells
    fac = mesh.facet_vertices
    ncell = len(tris) + len(fac)
    out = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(verts)} double",
    ]
    for x, y in verts:
        out.append(f"{format_double(x)} {format_double(y)} 0")
    out.append(f"CELLS {ncell} {4 * len(tris) + 3 * len(fac)}")
    for a, b, c in tris:
        out.append(f"3 {a} {b} {c}")
    for a, b in fac:
        out.append(f"2 {a} {b}")
    out.append(f"CELL_TYPES {ncell}")
    out.extend(["5"] * len(tris))
    out.extend(["3"] * len(fac))

    out.append(f"CELL_DATA {ncell}")
    out.append("SCALARS subdomain int 1")
    out.append("LOOKUP_TABLE default")
    out.extend(str(int(t)) for t in mesh.cell_tags)
    out.extend(["-1"] * len(fac))
    out.append("SCALARS facet_tag int 1")
    out.append("LOOKUP_TABLE default")
    out.extend(["-1"] * len(tris))
    out.extend(str(int(t)) for t in mesh.facet_tags)
    for name, values in (cell_data or {}).items():
        v = np.asarray(values, dtype=float)
        if v.shape != (len(tris),):
            raise ValidationError(
                f"cell_data {name!r} must have one value per triangle"
            )
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        out.extend(format_double(x) for x in v)
        out.extend(["0"] * len(fac))

    if point_data:
        out.append(f"POINT_DATA {len(verts)}")
        for name, values in point_data.items():
            v = np.asarray(values, dtype=float)
            if v.ndim == 1:
                if v.shape != (len(verts),):
                    raise ValidationError(
                        f"point_data {name!r} must have one value per vertex"
                    )
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(format_double(x) for x in v)
            else:
                if v.shape != (len(verts), 2):
                    raise ValidationError(
                        f"point_data {name!r} must be (n,) scalars or (n,2) vectors"
                    )
                out.append(f"VECTORS {name} double")
                out.extend(
                    f"{format_double(x)} {format_double(y)} 0" for x, y in v
                )
    with open(path, "w", newline="") as f:
        f.write("\n".join(out) + "\n")
