"""Voxel grids: distance transform, Sobel gradients, trilinear lookup, voxelization, Dice.

Grid geometry: ``values[i, j, k]`` sits at the model-space point
``origin + (i, j, k) * spacing`` (voxel centers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import MeshError, TriMesh
from .geometry.io import FormatError

VOX_MAGIC = "VOX3"


@dataclass
class VoxelGrid:
    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError("voxel grid must be 3-D with every dimension >= 1")
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def dims(self):
        return self.values.shape

    def centers(self) -> np.ndarray:
        """Model-space coordinates of all voxel centers, shape (W, H, D, 3)."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return self.origin + idx * self.spacing

    def bounds(self):
        return self.origin.copy(), self.origin + (np.array(self.dims) - 1) * self.spacing

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return (self.dims == other.dims and np.array_equal(self.spacing, other.spacing)
                and np.array_equal(self.origin, other.origin))

    def like(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing.copy(), self.origin.copy())


@dataclass
class GradientGrid:
    gx: VoxelGrid
    gy: VoxelGrid
    gz: VoxelGrid

    def stacked(self) -> np.ndarray:
        return np.stack([self.gx.values, self.gy.values, self.gz.values], axis=-1)


def boundary_mask(mask: VoxelGrid) -> np.ndarray:
    """Voxels with a 6-neighbour of the other label (both sides of the interface)."""
    m = mask.values.astype(bool)
    out = np.zeros_like(m)
    for ax in range(3):
        if m.shape[ax] < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        diff = m[tuple(lo)] != m[tuple(hi)]
        out[tuple(lo)] |= diff
        out[tuple(hi)] |= diff
    return out


def unsigned_distance_transform(mask: VoxelGrid) -> VoxelGrid:
    """Exact Euclidean distance from every voxel center to the nearest boundary voxel center."""
    m = mask.values.astype(bool)
    if m.all() or not m.any():
        raise ValueError("mask needs both foreground and background voxels")
    boundary = boundary_mask(mask)
    dist = ndimage.distance_transform_edt(~boundary, sampling=mask.spacing)
    return mask.like(dist.astype(np.float64))


def sobel_gradient(u: VoxelGrid) -> GradientGrid:
    """Sobel derivative along each axis, scaled to value per model unit."""
    if min(u.dims) < 3:
        raise ValueError("sobel_gradient needs every dimension >= 3")
    vals = u.values.astype(np.float64)
    out = []
    for ax in range(3):
        g = ndimage.sobel(vals, axis=ax, mode="nearest") / (32.0 * u.spacing[ax])
        out.append(u.like(g))
    return GradientGrid(*out)


def _clamped_index_coords(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    f = (np.asarray(points, dtype=np.float64) - grid.origin) / grid.spacing
    return np.clip(f, 0.0, np.array(grid.dims, dtype=np.float64) - 1.0)


def trilinear(grid: VoxelGrid, points) -> np.ndarray:
    """8-corner trilinear blend at model-space ``points`` (n, 3) or (3,)."""
    pts = np.atleast_2d(points)
    return trilinear_values(grid.values, grid, pts).reshape(np.shape(points)[:-1] + grid.values.shape[3:])


def trilinear_values(values: np.ndarray, grid: VoxelGrid, pts: np.ndarray) -> np.ndarray:
    """Trilinear lookup of ``values`` (W, H, D, ...) laid out on ``grid``'s geometry."""
    f = _clamped_index_coords(grid, pts)
    dims = np.array(values.shape[:3])
    i0 = np.minimum(np.floor(f).astype(np.int64), np.maximum(dims - 2, 0))
    t = f - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    out = 0.0
    for cx in (0, 1):
        wx = t[:, 0] if cx else 1.0 - t[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = t[:, 2] if cz else 1.0 - t[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                w = wx * wy * wz
                v = values[ix, iy, iz]
                out = out + (w.reshape(w.shape + (1,) * (v.ndim - 1)) * v)
    return np.asarray(out, dtype=np.float64)


# voxelization -------------------------------------------------------------

def _tie_sign(du, dv):
    """Sign of an edge function at a tie, under the perturbation p + (eps, eps**2)."""
    return np.where(dv != 0, -np.sign(dv), np.sign(du))


def _ray_hits(mesh: TriMesh, grid: VoxelGrid, axis: int):
    """(column u-index, column v-index, hit coordinate) for rays along ``axis``."""
    au, av = [a for a in range(3) if a != axis]
    v = mesh.vertices
    tri = v[mesh.faces]
    pu, pv, pa = tri[:, :, au], tri[:, :, av], tri[:, :, axis]
    ou, ov = grid.origin[au], grid.origin[av]
    su, sv = grid.spacing[au], grid.spacing[av]
    nu, nv = grid.dims[au], grid.dims[av]
    j0 = np.clip(np.ceil((pu.min(1) - ou) / su).astype(np.int64), 0, nu)
    j1 = np.clip(np.floor((pu.max(1) - ou) / su).astype(np.int64), -1, nu - 1)
    k0 = np.clip(np.ceil((pv.min(1) - ov) / sv).astype(np.int64), 0, nv)
    k1 = np.clip(np.floor((pv.max(1) - ov) / sv).astype(np.int64), -1, nv - 1)
    cu = np.maximum(j1 - j0 + 1, 0)
    cv = np.maximum(k1 - k0 + 1, 0)
    counts = cu * cv
    face = np.repeat(np.arange(len(tri)), counts)
    if len(face) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    local = np.arange(len(face)) - np.repeat(np.cumsum(counts) - counts, counts)
    j = j0[face] + local // cv[face]
    k = k0[face] + local % cv[face]
    qu = ou + j * su
    qv = ov + k * sv
    e = []
    for s in range(3):
        a_u, a_v = pu[face, s], pv[face, s]
        b_u, b_v = pu[face, (s + 1) % 3], pv[face, (s + 1) % 3]
        du, dv = b_u - a_u, b_v - a_v
        val = du * (qv - a_v) - dv * (qu - a_u)
        e.append((val, np.where(val != 0, np.sign(val), _tie_sign(du, dv))))
    s0, s1, s2 = (x[1] for x in e)
    inside = ((s0 > 0) & (s1 > 0) & (s2 > 0)) | ((s0 < 0) & (s1 < 0) & (s2 < 0))
    total = e[0][0] + e[1][0] + e[2][0]
    inside &= total != 0
    # barycentric weight of vertex s is the edge function of the opposite edge
    w = np.stack([e[1][0], e[2][0], e[0][0]], axis=1)[inside] / total[inside, None]
    hit = (w * pa[face[inside]]).sum(1)
    return j[inside], k[inside], hit


def voxelize(mesh: TriMesh, dims, spacing, origin, axis: int = 0) -> VoxelGrid:
    """Binary occupancy of voxel centers by ray parity along ``axis``."""
    if not mesh.is_watertight():
        raise MeshError("voxelize needs a watertight mesh")
    grid = VoxelGrid(np.zeros(tuple(int(d) for d in dims), dtype=np.uint8), spacing, origin)
    au, av = [a for a in range(3) if a != axis]
    j, k, hit = _ray_hits(mesh, grid, axis)
    n = grid.dims[axis]
    # centers strictly beyond a hit see it; cumulative count parity gives occupancy
    first = np.floor((hit - grid.origin[axis]) / grid.spacing[axis]).astype(np.int64) + 1
    centers_after = grid.origin[axis] + first * grid.spacing[axis]
    first = np.where(centers_after <= hit, first + 1, first)
    first = np.clip(first, 0, n)
    counts = np.zeros((grid.dims[au], grid.dims[av], n + 1), dtype=np.int64)
    np.add.at(counts, (j, k, first), 1)
    occ = (np.cumsum(counts, axis=2)[:, :, :n] % 2).astype(np.uint8)
    order = [0, 0, 0]
    order[au], order[av], order[axis] = 0, 1, 2
    return grid.like(np.transpose(occ, order))


def dice(a: VoxelGrid, b: VoxelGrid) -> float:
    if not a.same_geometry(b):
        raise ValueError("dice needs grids with identical geometry")
    x, y = a.values.astype(bool), b.values.astype(bool)
    denom = x.sum() + y.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(x, y).sum() / denom)


def center_scale_from_mask(mask: VoxelGrid):
    """Foreground centroid and bounding-sphere radius about it (floored at half a voxel)."""
    m = mask.values.astype(bool)
    if not m.any():
        raise ValueError("mask has no foreground voxels")
    pts = mask.origin + np.argwhere(m) * mask.spacing
    center = pts.mean(axis=0)
    scale = float(np.linalg.norm(pts - center, axis=1).max())
    return center, max(scale, 0.5 * float(mask.spacing.min()))


# .vox3 files ------------------------------------------------------------

def write_vox3(path, grid: VoxelGrid, dtype: str | None = None) -> None:
    if dtype is None:
        dtype = "u8" if grid.values.dtype in (np.uint8, np.bool_) else "f32"
    np_dtype = {"u8": "<u1", "f32": "<f4"}[dtype]
    header = {"magic": VOX_MAGIC, "dims": list(grid.dims), "spacing": grid.spacing.tolist(),
              "origin": grid.origin.tolist(), "dtype": dtype}
    data = np.asarray(grid.values).astype(np_dtype).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(data)


def read_vox3(path) -> VoxelGrid:
    try:
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
    except (OSError, ValueError) as exc:
        raise FormatError(path, ".vox3 voxel grid", str(exc)) from exc
    if not isinstance(header, dict) or header.get("magic") != VOX_MAGIC:
        raise FormatError(path, ".vox3 voxel grid", "bad magic")
    dtype = {"u8": "<u1", "f32": "<f4"}.get(header.get("dtype"))
    if dtype is None:
        raise FormatError(path, ".vox3 voxel grid", f"unknown dtype {header.get('dtype')!r}")
    dims = tuple(int(d) for d in header["dims"])
    body = raw[nl + 1:]
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(body) != expected:
        raise FormatError(path, ".vox3 voxel grid", f"expected {expected} data bytes, got {len(body)}")
    values = np.frombuffer(body, dtype=dtype).reshape(dims, order="F")
    values = values.astype(np.uint8) if header["dtype"] == "u8" else values.astype(np.float32)
    return VoxelGrid(values, header["spacing"], header["origin"])
