"""Iso-surface extraction with coarse-to-fine evaluation and reposing.

Extraction evaluates the resized canonical occupancy on a coarse grid,
refines only cells near the tau crossing (dilated by one cell per
level), and runs marching cubes on the finest grid; away from the
surface the grid holds sign-consistent parent values, so the result
matches a dense finest-grid extraction. Vertices are baked with field
normals and skinning weights so reposing is a pure blend of bone
transforms with no correspondence search.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage import measure

from . import canonical, skinning
from .canonical import TAU
from .errors import FileFormatError, FileLengthError, FileVersionError
from .skeleton import bone_transforms

WEIGHTS_MAGIC = b"GDNW"
WEIGHTS_VERSION = 1


@dataclass
class Mesh:
    vertices: np.ndarray              # (V, 3)
    triangles: np.ndarray             # (F, 3) int
    normals: np.ndarray               # (V, 3) unit
    weights: Optional[np.ndarray] = None  # (V, n_b)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.triangles.size:
            assert self.triangles.max() < len(self.vertices)
        assert np.all(np.isfinite(self.vertices))
        if self.normals.size:
            assert np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-6)

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0

    def copy(self):
        return Mesh(
            self.vertices.copy(),
            self.triangles.copy(),
            self.normals.copy(),
            None if self.weights is None else self.weights.copy(),
        )


def empty_mesh():
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# adaptive field evaluation


def _eval_chunked(fn, pts, chunk=200_000):
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        out[s : s + chunk] = fn(pts[s : s + chunk])
    return out


def _node_coords(idx, lo, cell):
    return lo + idx * cell


def adaptive_grid(fn, box, base_res, refine_levels, tau=TAU):
    """Evaluate fn on an adaptively refined grid.

    Returns (values (K,K,K) at the finest nodes, lo, cell). Cells whose
    coarse corners straddle tau (dilated by one) are re-evaluated at each
    finer level; everything else keeps its parent value.
    """
    lo, hi = np.asarray(box[0], dtype=np.float64), np.asarray(box[1], dtype=np.float64)
    res = int(base_res)
    axes = [np.linspace(lo[d], hi[d], res + 1) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = _eval_chunked(fn, grid.reshape(-1, 3)).reshape(res + 1, res + 1, res + 1)
    exact = np.ones_like(vals, dtype=bool)

    for _ in range(refine_levels):
        res2 = res * 2
        rep = np.repeat(np.repeat(np.repeat(vals, 2, 0), 2, 1), 2, 2)
        vals2 = rep[: res2 + 1, : res2 + 1, : res2 + 1].copy()
        repx = np.repeat(np.repeat(np.repeat(exact, 2, 0), 2, 1), 2, 2)
        exact2 = repx[: res2 + 1, : res2 + 1, : res2 + 1].copy()
        exact2[1::2, :, :] = False
        exact2[:, 1::2, :] = False
        exact2[:, :, 1::2] = False

        inside = vals2 >= tau
        cells_mixed = np.zeros((res2, res2, res2), dtype=bool)
        corner = inside[:-1, :-1, :-1]
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    if dx == dy == dz == 0:
                        continue
                    cells_mixed |= inside[dx : res2 + dx, dy : res2 + dy, dz : res2 + dz] != corner
        active = ndimage.binary_dilation(cells_mixed, structure=np.ones((3, 3, 3), bool))

        node_mask = np.zeros_like(exact2)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    node_mask[dx : res2 + dx, dy : res2 + dy, dz : res2 + dz] |= active
        todo = node_mask & ~exact2
        if todo.any():
            idx = np.argwhere(todo)
            cell = (hi - lo) / res2
            pts = _node_coords(idx, lo, cell)
            vals2[todo] = _eval_chunked(fn, pts)
            exact2 |= todo
        vals, exact, res = vals2, exact2, res2

    cell = (hi - lo) / res
    return vals, lo, cell


def marching_cubes_mesh(values, lo, cell, tau=TAU):
    """Marching cubes on a node grid; empty surface gives an empty mesh."""
    if values.min() >= tau or values.max() < tau:
        return empty_mesh(), np.zeros((0, 3))
    verts, faces, grad_normals, _ = measure.marching_cubes(
        values, level=tau, spacing=tuple(cell), allow_degenerate=False
    )
    verts = verts + lo
    mesh = Mesh(verts, faces.astype(np.int64), _unit(grad_normals))
    return mesh, grad_normals


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n == 0, 1.0, n)


def _orient_outward(mesh, fn, tau=TAU, probe=64, eps=1e-4):
    """Flip winding so triangle normals point down the occupancy gradient
    (outward: occupancy decreases leaving the body)."""
    if mesh.is_empty:
        return mesh
    rng = np.random.default_rng(0)
    take = rng.choice(len(mesh.triangles), size=min(probe, len(mesh.triangles)), replace=False)
    tri = mesh.triangles[take]
    a, b, c = (mesh.vertices[tri[:, k]] for k in range(3))
    tn = np.cross(b - a, c - a)
    tn = _unit(tn)
    centers = (a + b + c) / 3.0
    inside = fn(centers - eps * tn)
    outside = fn(centers + eps * tn)
    agree = np.mean(inside > outside)
    if agree < 0.5:
        mesh.triangles = mesh.triangles[:, ::-1].copy()
    return mesh


def extract_mesh(model, z, beta, base_res=32, refine_levels=2, zd=None):
    """Mesh of the resized canonical surface with baked attributes.

    Vertex normals come from the detail normal field (zero detail code if
    none is given); per-vertex skinning weights are evaluated at the
    size-neutral correspondence so reposing needs no root finding.
    """
    if base_res < 8:
        raise ValueError("base_res must be >= 8")
    beta = np.asarray(beta, dtype=np.float64)
    zd = np.zeros(model.arch.l_detail) if zd is None else zd

    def fn(pts):
        return canonical.occupancy(model, skinning.warp(model, pts, beta), z)[0]

    box = model.bbox
    values, lo, cell = adaptive_grid(fn, box, base_res, refine_levels)
    mesh, _ = marching_cubes_mesh(values, lo, cell)
    if mesh.is_empty:
        return mesh
    mesh = _orient_outward(mesh, fn)
    x_star = skinning.warp(model, mesh.vertices, beta)
    _, f = canonical.occupancy(model, x_star, z)
    mesh.normals = canonical.normal(model, x_star, zd, f)
    mesh.weights = skinning.skin_weights(model, x_star, z)
    return mesh


def repose_mesh(model, mesh, bp, z=None):
    """Pose an extracted mesh with its baked weights.

    Vertices blend per-bone rigid images in delta form (exact at the
    rest pose); normals apply the inverse-transpose of the blended
    rotation. Connectivity is untouched. `z` is unused: the weights were
    baked at extraction.
    """
    if mesh.weights is None:
        raise ValueError("mesh carries no baked skinning weights")
    bt = bone_transforms(model.skeleton, bp)
    v = mesh.vertices
    w = mesh.weights
    hom = np.concatenate([v, np.ones((len(v), 1))], axis=1)
    delta = np.zeros_like(v)
    for b in range(model.skeleton.n_bones):
        delta += w[:, b : b + 1] * (hom @ bt.mats[b, :3, :].T - v)
    v_posed = v + delta

    rot_delta = np.einsum("nb,bij->nij", w, bt.rotations - np.eye(3))
    blends = np.eye(3) + rot_delta
    n_t = np.linalg.solve(np.transpose(blends, (0, 2, 1)), mesh.normals[..., None])[..., 0]
    s = np.linalg.norm(n_t, axis=-1, keepdims=True)
    n_posed = np.where(np.abs(s - 1.0) < 1e-12, n_t, n_t / s)
    return Mesh(v_posed, mesh.triangles.copy(), n_posed, w.copy())


# ---------------------------------------------------------------------------
# topology checks


def edge_multiplicities(mesh):
    """Counts of undirected edges; watertight manifolds have all twos."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def connected_components(mesh):
    """Vertex labels of triangle-connected components."""
    n = len(mesh.vertices)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for tri in mesh.triangles:
        a = find(tri[0])
        for k in (1, 2):
            b = find(tri[k])
            parent[b] = a
    return np.array([find(i) for i in range(n)])


def euler_characteristics(mesh):
    """V - E + F per connected component (component of each triangle)."""
    labels = connected_components(mesh)
    out = {}
    t = mesh.triangles
    if t.shape[0] == 0:
        return out
    tri_label = labels[t[:, 0]]
    for lab in np.unique(tri_label):
        tris = t[tri_label == lab]
        vs = np.unique(tris)
        edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        out[int(lab)] = int(len(vs) - len(edges) + len(tris))
    return out


def is_watertight(mesh):
    if mesh.is_empty:
        return False
    return bool(np.all(edge_multiplicities(mesh) == 2))


# ---------------------------------------------------------------------------
# mesh I/O


def write_obj(path, mesh):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.9f} {n[1]:.9f} {n[2]:.9f}\n")
        for t in mesh.triangles:
            i, j, k = t + 1
            fh.write(f"f {i}//{i} {j}//{j} {k}//{k}\n")
    os.replace(tmp, path)


def read_obj(path):
    verts, normals, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    verts = np.asarray(verts, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64) if normals else np.zeros_like(verts)
    normals = _unit(normals) if normals.size else normals
    return Mesh(verts, np.asarray(faces, dtype=np.int64), normals)


def write_weights(path, mesh):
    """Sidecar: 16-byte header (magic, version, vertex count, bone count)
    then little-endian f64 weights, row-major."""
    if mesh.weights is None:
        raise ValueError("mesh carries no weights")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<III", WEIGHTS_VERSION, mesh.weights.shape[0], mesh.weights.shape[1]))
        fh.write(np.ascontiguousarray(mesh.weights, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_weights(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    version, n_v, n_b = struct.unpack_from("<III", blob, 4)
    if version != WEIGHTS_VERSION:
        raise FileVersionError(f"weights version {version}, supported {WEIGHTS_VERSION}")
    expect = n_v * n_b
    have = (len(blob) - 16) // 8
    if have < expect:
        raise FileLengthError("weight records", expect, have)
    w = np.frombuffer(blob, dtype="<f8", count=expect, offset=16).astype(np.float64)
    return w.reshape(n_v, n_b)
