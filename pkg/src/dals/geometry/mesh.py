"""Triangle mesh container and the basic operations on it.

Vertex indices are denoted ``vi``, face indices ``fi``. Faces are stored with
outward (counter-clockwise) orientation for the closed templates we build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

MAX_SUBDIVISIONS = 7
_QUALITY_NORM = 4.0 * np.sqrt(3.0)


class MeshError(ValueError):
    """Raised for structurally invalid meshes (bad indices, non-manifold, ...)."""


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy())

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(np.array(vertices, dtype=np.float64), self.faces.copy())

    def validate(self) -> None:
        f = self.faces
        if len(f) and (f.min() < 0 or f.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face repeats a vertex index")

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``e[:, 0] < e[:, 1]``."""
        return unique_edges(self.faces)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def is_watertight(self) -> bool:
        _, counts = _edge_face_counts(self.faces)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0)


def _edge_face_counts(faces):
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0, return_counts=True)


def icosphere(subdivisions: int = 0) -> TriMesh:
    """Unit-sphere triangulation obtained by repeatedly splitting an icosahedron.

    Every subdivision splits each triangle into four and re-projects the new
    midpoints onto the sphere, giving ``10 * 4**k + 2`` vertices.
    """
    if subdivisions < 0 or subdivisions > MAX_SUBDIVISIONS:
        raise ValueError(f"subdivisions must be in [0, {MAX_SUBDIVISIONS}]")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts, faces)


def _subdivide(verts, faces):
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    edges, inverse = np.unique(np.sort(directed, axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    m = (inverse + len(verts)).reshape(-1, 3)  # midpoints of edges (01, 12, 20)
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    new_faces = np.concatenate([
        np.stack([a, m01, m20], axis=1),
        np.stack([b, m12, m01], axis=1),
        np.stack([c, m20, m12], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    return np.vstack([verts, mids]), new_faces


def vertex_adjacency(mesh: TriMesh) -> sp.csr_matrix:
    """Symmetric 0/1 adjacency matrix of the mesh graph."""
    e = mesh.edges()
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def uniform_laplacian(mesh: TriMesh, flavor: str = "combinatorial") -> sp.csr_matrix:
    """Uniform graph Laplacian.

    ``combinatorial`` gives the symmetric ``D - A``; ``normalized`` gives the
    row-normalized ``I - D^-1 A`` whose action is one step of umbrella
    smoothing. Both annihilate constant fields.
    """
    _, counts = _edge_face_counts(mesh.faces)
    if len(counts) == 0 or np.any(counts > 2):
        raise MeshError("uniform_laplacian needs an edge-manifold mesh")
    adj = vertex_adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError("mesh has isolated vertices")
    if flavor == "combinatorial":
        lap = sp.diags(deg) - adj
    elif flavor == "normalized":
        lap = sp.identity(len(deg), format="csr") - sp.diags(1.0 / deg) @ adj
    else:
        raise ValueError(f"unknown Laplacian flavor {flavor!r}")
    return sp.csr_matrix(lap)


def face_quality(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-facet ``4*sqrt(3)*A / (a^2 + b^2 + c^2)``; 1 for equilateral, 0 if degenerate."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    sq = ((b - a) ** 2).sum(1) + ((c - b) ** 2).sum(1) + ((a - c) ** 2).sum(1)
    out = np.zeros(len(faces))
    ok = sq > 0
    out[ok] = _QUALITY_NORM * area[ok] / sq[ok]
    return out


def triangle_quality_loss(mesh: TriMesh) -> float:
    if mesh.n_faces < 1:
        raise MeshError("triangle_quality_loss needs at least one face")
    return float(1.0 - face_quality(mesh.vertices, mesh.faces).mean())


def normalize_shape(mesh: TriMesh):
    """Center on the vertex mean and scale into the unit sphere.

    Returns ``(normalized, centroid, scale)`` with
    ``original = normalized * scale + centroid``.
    """
    if mesh.n_vertices < 1:
        raise MeshError("cannot normalize an empty mesh")
    centroid = mesh.vertices.mean(axis=0)
    centered = mesh.vertices - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if not scale > 0:
        raise MeshError("all vertices coincide; scale is zero")
    return TriMesh(centered / scale, mesh.faces.copy()), centroid, scale


def normalize_points(points: np.ndarray):
    centroid = points.mean(axis=0)
    centered = points - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if not scale > 0:
        raise MeshError("all points coincide; scale is zero")
    return centered / scale, centroid, scale


def denormalize(mesh: TriMesh, centroid, scale: float) -> TriMesh:
    return TriMesh(mesh.vertices * scale + np.asarray(centroid), mesh.faces.copy())
