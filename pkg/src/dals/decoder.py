"""Pointwise MLP decoder mapping (template position, latent) to a vertex offset.

The network is ``in(3 + d) -> h1 -> h2 -> h3 -> 3`` with layer normalization
before every ReLU and a linear output layer. The output layer starts at zero,
so an untrained decoder leaves the template in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .geometry import TriMesh
from .geometry.io import FormatError

DEFAULT_HIDDEN = (724, 724, 362)
DEFAULT_LATENT_DIM = 128
CHECKPOINT_MAGIC = "DALS"
CHECKPOINT_VERSION = 1


@dataclass
class DecoderParams:
    latent_dim: int
    hidden: tuple
    arrays: dict = field(default_factory=dict)

    @classmethod
    def init(cls, latent_dim: int = DEFAULT_LATENT_DIM, hidden=DEFAULT_HIDDEN,
             rng: np.random.Generator | None = None) -> "DecoderParams":
        if latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = tuple(int(h) for h in hidden)
        arrays = {}
        sizes = (3 + latent_dim,) + hidden
        for i in range(len(hidden)):
            bound = 1.0 / np.sqrt(sizes[i])
            arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(sizes[i], sizes[i + 1]))
            arrays[f"b{i}"] = rng.uniform(-bound, bound, size=(1, sizes[i + 1]))
            arrays[f"gain{i}"] = np.ones((1, sizes[i + 1]))
            arrays[f"shift{i}"] = np.zeros((1, sizes[i + 1]))
        arrays["Wout"] = np.zeros((hidden[-1], 3))
        arrays["bout"] = np.zeros((1, 3))
        return cls(latent_dim, hidden, arrays)

    @property
    def names(self):
        return list(self.arrays)

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.latent_dim, self.hidden, {k: v.copy() for k, v in self.arrays.items()})

    def watch(self, tape: dc.Tape) -> dict:
        return {k: tape.watch(v) for k, v in self.arrays.items()}

    def constants(self) -> dict:
        return {k: dc.Tensor(v) for k, v in self.arrays.items()}


def mlp(weights: dict, x, z) -> dc.Tensor:
    """Offsets for rows of ``x`` (n, 3) conditioned on the matching rows of ``z`` (n, d)."""
    h = dc.concat([x, z], axis=1)
    i = 0
    while f"W{i}" in weights:
        h = dc.add(dc.matmul(h, weights[f"W{i}"]), weights[f"b{i}"])
        h = dc.relu(dc.layer_norm(h, weights[f"gain{i}"], weights[f"shift{i}"]))
        i += 1
    return dc.add(dc.matmul(h, weights["Wout"]), weights["bout"])


def _check_latents(params: DecoderParams, z: np.ndarray, n: int):
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise ValueError(f"latent dimension mismatch: expected {params.latent_dim}, got {z.shape}")
    if z.shape[0] not in (1, n):
        raise ValueError(f"latent rows ({z.shape[0]}) must be 1 or match the vertex count ({n})")


def decode(params: DecoderParams, z, x) -> np.ndarray:
    """Offsets for positions ``x`` (n, 3) or (3,); ``z`` is one latent row or one per position."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    _check_latents(params, z, len(x))
    if z.shape[0] == 1 and len(x) > 1:
        z = np.repeat(z, len(x), axis=0)
    out = mlp(params.constants(), dc.Tensor(x), dc.Tensor(z)).value
    return out


def deform_vertices(weights: dict, latents: dc.Tensor, template_vertices: np.ndarray) -> dc.Tensor:
    """Differentiable ``template + D(Z[v], x_v)``; ``latents`` is (V, d) or (1, d) broadcast."""
    n = len(template_vertices)
    if latents.shape[0] == 1 and n > 1:
        latents = dc.broadcast_rows(latents, n)
    x = dc.Tensor(template_vertices)
    return dc.add(x, mlp(weights, x, latents))


def deform_mesh(params: DecoderParams, Z, template: TriMesh) -> TriMesh:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    _check_latents(params, Z, template.n_vertices)
    v = deform_vertices(params.constants(), dc.Tensor(Z), template.vertices).value
    return TriMesh(v, template.faces.copy())


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (normalized Gaussian quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotate_template(template: TriMesh, rotation) -> TriMesh:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3) or np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9 or np.linalg.det(r) <= 0:
        raise ValueError("rotation must be a proper orthonormal 3x3 matrix")
    return TriMesh(template.vertices @ r.T, template.faces.copy())


# checkpoint container ---------------------------------------------------

@dataclass
class Checkpoint:
    params: DecoderParams
    latents: np.ndarray
    template_subdivision: int
    shape_ids: list
    meta: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.params.latent_dim


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON header line, newline, then little-endian float64 tensor blobs."""
    tensors = dict(ckpt.params.arrays)
    tensors["latents"] = ckpt.latents
    entries, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        offset += len(data)
        blobs.append(data)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "latent_dim": ckpt.params.latent_dim,
        "hidden": list(ckpt.params.hidden),
        "template_subdivision": ckpt.template_subdivision,
        "shape_count": len(ckpt.latents),
        "shape_ids": list(ckpt.shape_ids),
        "meta": ckpt.meta,
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path) -> dict:
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
        header = json.loads(line)
    except (OSError, ValueError) as exc:
        raise FormatError(path, "DALS checkpoint", str(exc)) from exc
    if not isinstance(header, dict) or header.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(path, "DALS checkpoint", "bad magic")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(path, "DALS checkpoint", f"unsupported version {header.get('version')}")
    return header


def load_checkpoint(path) -> Checkpoint:
    header = read_checkpoint_header(path)
    raw = Path(path).read_bytes()
    start = raw.index(b"\n") + 1
    arrays = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        chunk = raw[lo:lo + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(path, "DALS checkpoint", f"truncated tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    latents = arrays.pop("latents")
    params = DecoderParams(header["latent_dim"], tuple(header["hidden"]), arrays)
    return Checkpoint(params, latents, header["template_subdivision"], header["shape_ids"], header["meta"])
