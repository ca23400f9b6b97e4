"""ASCII OBJ (meshes) and PLY (point sets) readers and writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TriMesh


class FormatError(ValueError):
    """A file did not match the expected format; carries the offending path."""

    def __init__(self, path, expected: str, detail: str = ""):
        self.path = str(path)
        self.expected = expected
        msg = f"{self.path}: expected {expected}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(path, "OBJ mesh", str(exc)) from exc
    try:
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"vertex line needs three coordinates: {line!r}")
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) for t in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    except (ValueError, IndexError) as exc:
        raise FormatError(path, "OBJ mesh", str(exc)) from exc
    if not verts or not faces:
        raise FormatError(path, "OBJ mesh", "no vertices or faces")
    mesh = TriMesh(np.array(verts), np.array(faces))
    try:
        mesh.validate()
    except ValueError as exc:
        raise FormatError(path, "OBJ mesh", str(exc)) from exc
    return mesh


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z", "end_header"]
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in points.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path) -> np.ndarray:
    """Vertex positions from an ASCII PLY file (other elements are ignored)."""
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, "ASCII PLY point set", str(exc)) from exc
    if not lines or lines[0].strip() != "ply":
        raise FormatError(path, "ASCII PLY point set", "missing 'ply' magic")
    n_vertex, props, elements, in_vertex = None, [], [], False
    try:
        end = lines.index("end_header")
    except ValueError as exc:
        raise FormatError(path, "ASCII PLY point set", "missing end_header") from exc
    for line in lines[1:end]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(path, "ASCII PLY point set", "binary PLY not supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            elements.append((parts[1], int(parts[2])))
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
    if n_vertex is None or not {"x", "y", "z"} <= set(props):
        raise FormatError(path, "ASCII PLY point set", "no vertex x/y/z properties")
    skip = 0
    for name, count in elements:
        if name == "vertex":
            break
        skip += count
    rows = lines[end + 1 + skip:end + 1 + skip + n_vertex]
    try:
        data = np.array([[float(t) for t in r.split()] for r in rows])
    except ValueError as exc:
        raise FormatError(path, "ASCII PLY point set", str(exc)) from exc
    if data.shape[0] != n_vertex:
        raise FormatError(path, "ASCII PLY point set", "truncated vertex list")
    cols = [props.index(c) for c in "xyz"]
    return data[:, cols]
