"""Differentiable point sampling on surfaces and plane slices.

Every sample carries its face index and barycentric weights so a point can be
rebuilt as a fixed linear combination of the face's three vertices. This is
what lets gradients flow from samples back to vertex positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TriMesh


@dataclass
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        self.normal = n / norm
        self.offset = float(self.offset) / norm

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return points @ self.normal - self.offset


@dataclass
class SurfaceSamples:
    """Samples as (face, barycentrics); ``points`` is cached for the mesh they came from."""

    face: np.ndarray
    bary: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.face)

    def weights(self, faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
        """Sparse (n, V) matrix ``W`` with ``points = W @ vertices``."""
        n = len(self.face)
        rows = np.repeat(np.arange(n), 3)
        cols = faces[self.face].reshape(-1)
        return sp.csr_matrix((self.bary.reshape(-1), (rows, cols)), shape=(n, n_vertices))

    def evaluate(self, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        tri = vertices[faces[self.face]]
        return np.einsum("nk,nkd->nd", self.bary, tri)


@dataclass
class SliceSamples(SurfaceSamples):
    """Samples on a mesh/plane intersection.

    ``bary1``/``bary2`` are the barycentrics of the segment end points inside
    the face and ``r`` the mixing weight, so ``bary = r*bary1 + (1-r)*bary2``.
    """

    bary1: np.ndarray = None
    bary2: np.ndarray = None
    r: np.ndarray = None


def uniform_barycentrics(n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    return np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> SurfaceSamples:
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("cannot sample a surface with zero total area")
    face = rng.choice(mesh.n_faces, size=n, p=areas / total)
    bary = uniform_barycentrics(n, rng)
    s = SurfaceSamples(face=face, bary=bary, points=None)
    s.points = s.evaluate(mesh.vertices, mesh.faces)
    return s


_EDGES = ((0, 1), (1, 2), (2, 0))


def plane_segments(mesh: TriMesh, plane: Plane):
    """Intersect every face with ``plane``.

    Returns ``(face, bary1, bary2)`` for faces whose intersection is a proper
    segment. Faces lying in the plane or touching it at a single vertex are
    dropped.
    """
    d = plane.signed_distance(mesh.vertices)[mesh.faces]  # (F, 3)
    nf = len(d)
    # up to two end points per face, as barycentric rows
    pts = np.zeros((nf, 2, 3))
    count = np.zeros(nf, dtype=np.int64)
    rows = np.arange(nf)

    def push(mask, bary):
        idx = rows[mask & (count < 2)]
        pts[idx, count[idx]] = bary[mask & (count < 2)]
        count[mask] += 1

    for i in range(3):
        bary = np.zeros((nf, 3))
        bary[:, i] = 1.0
        push(d[:, i] == 0.0, bary)
    for i, j in _EDGES:
        di, dj = d[:, i], d[:, j]
        cross = di * dj < 0
        t = np.zeros(nf)
        t[cross] = di[cross] / (di[cross] - dj[cross])
        bary = np.zeros((nf, 3))
        bary[:, i] = 1.0 - t
        bary[:, j] = t
        push(cross, bary)
    ok = count == 2
    return rows[ok], pts[ok, 0], pts[ok, 1]


def plane_mesh_intersection_samples(mesh: TriMesh, plane: Plane, m: int,
                                    rng: np.random.Generator) -> SliceSamples:
    """Sample ``m`` points uniformly along the total length of the mesh slice."""
    face, b1, b2 = plane_segments(mesh, plane)
    empty = SliceSamples(face=np.zeros(0, dtype=np.int64), bary=np.zeros((0, 3)),
                         points=np.zeros((0, 3)), bary1=np.zeros((0, 3)),
                         bary2=np.zeros((0, 3)), r=np.zeros(0))
    if len(face) == 0 or m <= 0:
        return empty
    tri = mesh.vertices[mesh.faces[face]]
    x1 = np.einsum("nk,nkd->nd", b1, tri)
    x2 = np.einsum("nk,nkd->nd", b2, tri)
    lengths = np.linalg.norm(x1 - x2, axis=1)
    total = lengths.sum()
    if not total > 0:
        return empty
    pick = rng.choice(len(face), size=m, p=lengths / total)
    r = rng.random(m)
    bary = r[:, None] * b1[pick] + (1.0 - r[:, None]) * b2[pick]
    s = SliceSamples(face=face[pick], bary=bary, points=None,
                     bary1=b1[pick], bary2=b2[pick], r=r)
    s.points = s.evaluate(mesh.vertices, mesh.faces)
    return s
