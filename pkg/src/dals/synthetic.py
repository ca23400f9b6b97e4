"""Synthetic organ-like shapes: superellipsoids with smooth bumps and dents.

Each shape is a radial deformation of an icosphere, so it stays a watertight
genus-0 triangulation. Also hosts the smooth-deformation point augmenter and
the corruption used to simulate poor segmentations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import TriMesh, icosphere, normalize_points, normalize_shape, sample_surface
from .volume import VoxelGrid

AXIS_RANGE = (0.5, 1.0)
EXPONENT_RANGE = (0.7, 1.3)
MAX_BUMP_DEPTH = 0.3
BUMP_WIDTH_RANGE = (0.35, 0.7)


@dataclass
class ShapeParams:
    axes: np.ndarray
    exponent: float
    bump_dirs: np.ndarray
    bump_depths: np.ndarray
    bump_widths: np.ndarray


def random_shape_params(rng: np.random.Generator) -> ShapeParams:
    n_bumps = int(rng.integers(1, 4))
    dirs = rng.standard_normal((n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return ShapeParams(
        axes=rng.uniform(*AXIS_RANGE, size=3),
        exponent=float(rng.uniform(*EXPONENT_RANGE)),
        bump_dirs=dirs,
        bump_depths=rng.uniform(-MAX_BUMP_DEPTH, MAX_BUMP_DEPTH, size=n_bumps),
        bump_widths=rng.uniform(*BUMP_WIDTH_RANGE, size=n_bumps),
    )


def shape_radius(params: ShapeParams, directions: np.ndarray) -> np.ndarray:
    """Radial distance of the surface along unit ``directions``."""
    q = 2.0 / params.exponent
    r = (np.abs(directions / params.axes) ** q).sum(axis=1) ** (-1.0 / q)
    for d, h, w in zip(params.bump_dirs, params.bump_depths, params.bump_widths):
        ang = np.arccos(np.clip(directions @ d, -1.0, 1.0))
        r = r * (1.0 + h * np.exp(-0.5 * (ang / w) ** 2))
    return r


def synth_mesh(params: ShapeParams, subdivisions: int = 4) -> TriMesh:
    sphere = icosphere(subdivisions)
    r = shape_radius(params, sphere.vertices)
    mesh, _, _ = normalize_shape(TriMesh(sphere.vertices * r[:, None], sphere.faces))
    return mesh


@dataclass
class ShapeCorpus:
    ids: list
    points: list
    centroids: list = field(default_factory=list)
    scales: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    params: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "ShapeCorpus":
        pick = lambda seq: [seq[i] for i in index] if seq else []  # noqa: E731
        return ShapeCorpus(pick(self.ids), pick(self.points), pick(self.centroids),
                           pick(self.scales), pick(self.meshes), pick(self.params))


def corpus_from_meshes(ids, meshes, n_points: int, rng: np.random.Generator) -> ShapeCorpus:
    """Normalize each mesh and fix ``n_points`` surface samples as its training target."""
    out = ShapeCorpus([], [])
    for sid, mesh in zip(ids, meshes):
        norm, c, s = normalize_shape(mesh)
        out.ids.append(sid)
        out.points.append(sample_surface(norm, n_points, rng).points)
        out.centroids.append(c)
        out.scales.append(s)
        out.meshes.append(norm)
    return out


def synth_corpus(n_shapes: int, rng: np.random.Generator, n_points: int = 2500,
                 subdivisions: int = 4, prefix: str = "shape") -> ShapeCorpus:
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    params = [random_shape_params(rng) for _ in range(n_shapes)]
    meshes = [synth_mesh(p, subdivisions) for p in params]
    corpus = corpus_from_meshes([f"{prefix}_{i:03d}" for i in range(n_shapes)], meshes, n_points, rng)
    corpus.params = params
    return corpus


def smooth_displacement(points: np.ndarray, anchors: np.ndarray, displacements: np.ndarray,
                        bandwidth: float = 0.5) -> np.ndarray:
    """Gaussian-RBF blend of anchor displacements.

    Kernel weights are capped to sum to at most one, so no point moves further
    than the largest anchor displacement.
    """
    d2 = ((points[:, None, :] - anchors[None]) ** 2).sum(-1)
    w = np.exp(-0.5 * d2 / bandwidth ** 2)
    w /= np.maximum(1.0, w.sum(axis=1, keepdims=True))
    return points + w @ displacements


def augment_shape(points: np.ndarray, rng: np.random.Generator, n_anchors: int = 4,
                  max_displacement: float = 0.1, bandwidth: float = 0.5,
                  displacements: np.ndarray | None = None) -> np.ndarray:
    """Random smooth deformation followed by re-normalization."""
    points = np.asarray(points, dtype=np.float64)
    anchors = points[rng.integers(0, len(points), size=n_anchors)]
    if displacements is None:
        dirs = rng.standard_normal((n_anchors, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        displacements = dirs * rng.uniform(0.0, max_displacement, size=(n_anchors, 1))
    out, _, _ = normalize_points(smooth_displacement(points, anchors, displacements, bandwidth))
    return out


def augment_corpus(corpus: ShapeCorpus, per_shape: int, rng: np.random.Generator) -> ShapeCorpus:
    """Original shapes followed by ``per_shape`` augmented copies of each."""
    if per_shape <= 0:
        return corpus
    out = ShapeCorpus(list(corpus.ids), list(corpus.points))
    for sid, pts in zip(corpus.ids, corpus.points):
        for k in range(per_shape):
            out.ids.append(f"{sid}_aug{k}")
            out.points.append(augment_shape(pts, rng))
    return out


def corrupt_mask(mask: VoxelGrid, rng: np.random.Generator, flip_prob: float = 0.5,
                 n_blobs: int = 3, blob_radius: float = 0.12, n_holes: int = 2) -> VoxelGrid:
    """Simulate a poor segmentation: ragged boundary, spurious blobs and missed chunks.

    ``blob_radius`` is in model units. Blobs are centred on the surface so they
    read as spurious growths; holes are carved just inside it.
    """
    m = mask.values.astype(bool)
    struct = ndimage.generate_binary_structure(3, 1)
    grown = ndimage.binary_dilation(m, struct)
    shrunk = ndimage.binary_erosion(m, struct)
    noisy = m.copy()
    outer = grown & ~m
    inner = m & ~shrunk
    noisy[outer & (rng.random(m.shape) < flip_prob)] = True
    noisy[inner & (rng.random(m.shape) < flip_prob)] = False
    centers = mask.centers()
    surface = np.argwhere(inner)
    for count, value, inset in ((n_blobs, True, 0.0), (n_holes, False, 0.5)):
        if len(surface) == 0:
            break
        for idx in surface[rng.integers(0, len(surface), size=count)]:
            c = centers[tuple(idx)]
            if inset:
                mid = centers[m].mean(axis=0)
                c = c + inset * blob_radius * (mid - c) / max(np.linalg.norm(mid - c), 1e-12)
            ball = ((centers - c) ** 2).sum(-1) <= blob_radius ** 2
            noisy[ball] = value
    return mask.like(noisy.astype(np.uint8))
