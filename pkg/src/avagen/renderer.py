"""Implicit surface rendering and scan-mesh normal-map rendering.

Rays march the posed occupancy field with uniform coarse steps; the
first tau-crossing bracket is polished by a vectorized bracketed secant.
Geometry (hits, canonical correspondences, rotation blends) is separated
from shading so the adversarial stage can re-shade cached geometry while
gradients flow to the normal field only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import canonical, skinning
from .canonical import TAU
from .diffnum import tape
from .diffnum.tape import Var
from .skeleton import apply_transform, bone_transforms


@dataclass
class Camera:
    center: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    width: int = 128
    height: int = 128
    kind: str = "orthographic"  # or "pinhole"
    scale: float = 1.2          # orthographic half-extent, meters
    focal: float = 1.0          # pinhole focal length (unit image plane)

    def __post_init__(self):
        for attr in ("center", "right", "up", "forward"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.float64))
        basis = np.stack([self.right, self.up, self.forward])
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-9):
            raise ValueError("camera basis must be orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    def rays(self):
        """Per-pixel ray origins and unit directions, row-major."""
        j = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        i = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        uu, vv = np.meshgrid(j, i)
        u = uu.reshape(-1, 1)
        v = vv.reshape(-1, 1)
        if self.kind == "orthographic":
            origins = self.center + u * self.scale * self.right + v * self.scale * self.up
            dirs = np.broadcast_to(self.forward, origins.shape).copy()
        else:
            origins = np.broadcast_to(self.center, (u.shape[0], 3)).copy()
            dirs = self.forward + (u * self.right + v * self.up) / self.focal
            dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        return origins, dirs

    def pixel_ray(self, row, col):
        origins, dirs = self.rays()
        k = row * self.width + col
        return origins[k], dirs[k]


def orbit_camera(azimuth_deg, elevation_deg=0.0, distance=2.5, center=(0.0, 0.0, 0.0),
                 width=128, height=128, scale=1.2, kind="orthographic"):
    """Camera on a circle around the y axis, looking at `center`."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye_dir = np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
    center = np.asarray(center, dtype=np.float64)
    eye = center + distance * eye_dir
    forward = center - eye
    forward /= np.linalg.norm(forward)
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ world_up) > 0.999:
        world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return Camera(eye, right, up, forward, width, height, kind=kind, scale=scale)


@dataclass
class NormalMap:
    values: np.ndarray  # (H, W, 3)
    mask: np.ndarray    # (H, W) bool

    def __post_init__(self):
        hit = self.values[self.mask]
        if hit.size:
            assert np.allclose(np.linalg.norm(hit, axis=-1), 1.0, atol=1e-6)
        assert np.all(self.values[~self.mask] == 0.0)


# ---------------------------------------------------------------------------
# ray / box and marching


def ray_box_range(origins, dirs, box, eps=1e-12):
    """Slab intersection; returns (t0, t1, hit) with t0 >= 0."""
    lo, hi = box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(dirs) < eps, np.copysign(eps, dirs), dirs)
    ta = (lo - origins) * inv
    tb = (hi - origins) * inv
    t0 = np.minimum(ta, tb).max(axis=1)
    t1 = np.maximum(ta, tb).min(axis=1)
    t0 = np.maximum(t0, 0.0)
    return t0, t1, t1 > t0


def march_field(occ_fn, origins, dirs, t0, t1, n_coarse=64, secant_iters=12, tau=TAU,
                chunk=200_000):
    """First tau-crossing along each ray.

    occ_fn maps (M, 3) points to (M,) occupancies. Coarse uniform
    sampling brackets the first sign change of (o - tau); a vectorized
    bracketed secant polishes it. Returns (hit (N,), t_star (N,)).
    """
    n = origins.shape[0]
    hit = np.zeros(n, dtype=bool)
    t_star = np.zeros(n)
    live = t1 > t0
    if not live.any():
        return hit, t_star
    idx = np.nonzero(live)[0]
    steps = np.linspace(0.0, 1.0, n_coarse)
    ts = t0[idx, None] + steps[None, :] * (t1 - t0)[idx, None]
    occ = np.empty((idx.size, n_coarse))
    pts_all = origins[idx, None, :] + ts[..., None] * dirs[idx, None, :]
    flat = pts_all.reshape(-1, 3)
    for s in range(0, flat.shape[0], chunk):
        occ.reshape(-1)[s : s + chunk] = occ_fn(flat[s : s + chunk])
    signs = occ - tau
    crossing = (signs[:, :-1] < 0) & (signs[:, 1:] >= 0)
    has = crossing.any(axis=1)
    if not has.any():
        return hit, t_star
    first = np.argmax(crossing, axis=1)
    rows = np.nonzero(has)[0]
    lo_t = ts[rows, first[rows]]
    hi_t = ts[rows, first[rows] + 1]
    f_lo = signs[rows, first[rows]]
    f_hi = signs[rows, first[rows] + 1]
    ridx = idx[rows]

    a, b = lo_t.copy(), hi_t.copy()
    fa, fb = f_lo.copy(), f_hi.copy()
    best_t = np.where(np.abs(fa) < np.abs(fb), a, b)
    best_f = np.minimum(np.abs(fa), np.abs(fb))
    for _ in range(secant_iters):
        denom = fb - fa
        t = np.where(denom != 0, b - fb * (b - a) / np.where(denom == 0, 1.0, denom), 0.5 * (a + b))
        inside = (t > np.minimum(a, b)) & (t < np.maximum(a, b))
        t = np.where(inside, t, 0.5 * (a + b))
        pts = origins[ridx] + t[:, None] * dirs[ridx]
        ft = occ_fn(pts) - tau
        better = np.abs(ft) < best_f
        best_t = np.where(better, t, best_t)
        best_f = np.where(better, np.abs(ft), best_f)
        neg = fa * ft > 0
        a = np.where(neg, t, a)
        fa = np.where(neg, ft, fa)
        b = np.where(neg, b, t)
        fb = np.where(neg, fb, ft)
    hit[ridx] = True
    t_star[ridx] = best_t
    return hit, t_star


# ---------------------------------------------------------------------------
# posed-field rendering


def posed_scene_box(model, bp, pad=0.05):
    """AABB containing the deformed body.

    Every deformed point is a convex blend of per-bone rigid images of
    canonical points, so the box over all transformed volume-box corners
    is a sound bound.
    """
    bt = bone_transforms(model.skeleton, bp)
    lo, hi = model.bbox
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    imgs = []
    for b in range(model.skeleton.n_bones):
        imgs.append(apply_transform(bt.mats[b], corners))
    imgs = np.concatenate(imgs)
    return np.stack([imgs.min(axis=0) - pad, imgs.max(axis=0) + pad])


@dataclass
class GeometryCache:
    """Frozen intersection geometry of one render."""

    width: int
    height: int
    hit_idx: np.ndarray    # flat pixel indices of hits
    x_prime: np.ndarray    # (Nh, 3)
    x_star: np.ndarray     # (Nh, 3) canonical correspondences
    f: np.ndarray          # (Nh, l_f)
    inv_t: np.ndarray      # (Nh, 3, 3) inverse-transpose rotation blends

    @property
    def mask(self):
        m = np.zeros(self.width * self.height, dtype=bool)
        m[self.hit_idx] = True
        return m.reshape(self.height, self.width)


def render_geometry(model, camera, bp, z, n_coarse=64, tol=skinning.CORR_TOL):
    """Ray-cast the posed field and cache everything shading needs."""
    bt = bone_transforms(model.skeleton, bp)
    fields = skinning.model_fields(model, z)
    box = posed_scene_box(model, bp)
    origins, dirs = camera.rays()
    t0, t1, _ = ray_box_range(origins, dirs, box)

    def occ_fn(pts):
        return skinning.posed_fields_batch(fields, pts, bp.beta, bt.mats, tol=tol)["o"]

    hit, t_star = march_field(occ_fn, origins, dirs, t0, t1, n_coarse=n_coarse)
    hit_idx = np.nonzero(hit)[0]
    if hit_idx.size == 0:
        return GeometryCache(camera.width, camera.height, hit_idx,
                             np.zeros((0, 3)), np.zeros((0, 3)),
                             np.zeros((0, model.arch.l_f)), np.zeros((0, 3, 3)))
    xp = origins[hit_idx] + t_star[hit_idx, None] * dirs[hit_idx]
    out = skinning.posed_fields_batch(fields, xp, bp.beta, bt.mats, tol=tol)
    keep = out["has_root"]
    hit_idx = hit_idx[keep]
    xp = xp[keep]
    x_star = out["x_star"][keep]
    f = out["f"][keep]
    w = skinning.skin_weights(model, x_star, z)
    blends = skinning.blend_rotation(w, bt.rotations)
    inv_t = np.linalg.inv(np.transpose(blends, (0, 2, 1)))
    return GeometryCache(camera.width, camera.height, hit_idx, xp, x_star, f, inv_t)


def shade_normals(model, cache, zd):
    """Plain-numpy shading of cached geometry into a NormalMap."""
    h, w = cache.height, cache.width
    values = np.zeros((h * w, 3))
    if cache.hit_idx.size:
        raw = canonical.normal(model, cache.x_star, zd, cache.f)
        n = np.einsum("nij,nj->ni", cache.inv_t, raw)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        values[cache.hit_idx] = n
    return NormalMap(values.reshape(h, w, 3), cache.mask)


def shade_normals_var(model, cache, zd):
    """Graph-mode shading: returns the (H, W, 3) image as a Var.

    Geometry (hits, correspondences, rotation blends) is constant;
    gradients reach the normal field parameters and the detail code.
    """
    h, w = cache.height, cache.width
    if cache.hit_idx.size == 0:
        return Var(np.zeros((h, w, 3)))
    raw = canonical.normal_var(model, Var(cache.x_star), zd, Var(cache.f))
    n = tape.rowmat(cache.inv_t, raw)
    n = tape.unitnorm(n)
    comp_idx = (cache.hit_idx[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
    img = tape.scatter(n, comp_idx, h * w * 3)
    return tape.reshape(img, (h, w, 3))


def ray_intersect(model, camera, row, col, bp, z, t_range=None, n_coarse=64):
    """Single-pixel intersection against the posed field.

    Returns (hit, x_prime, t_star, correspondences); correspondences is
    the deduplicated list at the hit point (empty on miss).
    """
    origin, direction = camera.pixel_ray(row, col)
    if t_range is None:
        box = posed_scene_box(model, bp)
        t0, t1, ok = ray_box_range(origin[None], direction[None], box)
        if not ok[0]:
            return False, None, None, []
        t0, t1 = t0[0], t1[0]
    else:
        t0, t1 = t_range
    bt = bone_transforms(model.skeleton, bp)
    fields = skinning.model_fields(model, z)

    def occ_fn(pts):
        return skinning.posed_fields_batch(fields, pts, bp.beta, bt.mats)["o"]

    hit, t_star = march_field(occ_fn, origin[None], direction[None],
                              np.array([t0]), np.array([t1]), n_coarse=n_coarse)
    if not hit[0]:
        return False, None, None, []
    xp = origin + t_star[0] * direction
    corrs = skinning.canonical_correspondence(model, xp, bp, z)
    return True, xp, float(t_star[0]), corrs


def render_normal_map(model, camera, bp, z, zd, n_coarse=64):
    """Posed normal map of the model: intersection then normal posing."""
    cache = render_geometry(model, camera, bp, z, n_coarse=n_coarse)
    return shade_normals(model, cache, zd)


# ---------------------------------------------------------------------------
# mesh rendering (ground-truth normal maps for the discriminator)


def render_scan_normal_map(mesh, camera, chunk=4096):
    """First-hit ray-triangle intersection with barycentric normals.

    Degenerate triangles are skipped and counted on the returned map as
    attribute `skipped_triangles`.
    """
    v = mesh.vertices
    tris = mesh.triangles
    vn = mesh.normals
    a = v[tris[:, 0]]
    e1 = v[tris[:, 1]] - a
    e2 = v[tris[:, 2]] - a
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    good = area2 > 1e-14
    skipped = int((~good).sum())
    a, e1, e2 = a[good], e1[good], e2[good]
    tri_ids = np.nonzero(good)[0]

    origins, dirs = camera.rays()
    n_pix = origins.shape[0]
    values = np.zeros((n_pix, 3))
    mask = np.zeros(n_pix, dtype=bool)
    for s in range(0, n_pix, chunk):
        o = origins[s : s + chunk]
        d = dirs[s : s + chunk]
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tj,mtj->mt", e1, pvec)
        ok = np.abs(det) > 1e-12
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o[:, None, :] - a[None, :, :]
        uu = np.einsum("mtj,mtj->mt", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        vv = np.einsum("mj,mtj->mt", d, qvec) * inv_det
        tt = np.einsum("tj,mtj->mt", e2, qvec) * inv_det
        valid = ok & (uu >= -1e-12) & (vv >= -1e-12) & (uu + vv <= 1 + 1e-12) & (tt > 1e-9)
        tt = np.where(valid, tt, np.inf)
        best = np.argmin(tt, axis=1)
        rows = np.arange(o.shape[0])
        has = np.isfinite(tt[rows, best])
        if not has.any():
            continue
        ri = rows[has]
        bi = best[has]
        tri = tris[tri_ids[bi]]
        w0 = 1.0 - uu[ri, bi] - vv[ri, bi]
        n = (
            w0[:, None] * vn[tri[:, 0]]
            + uu[ri, bi][:, None] * vn[tri[:, 1]]
            + vv[ri, bi][:, None] * vn[tri[:, 2]]
        )
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        values[s + ri] = n
        mask[s + ri] = True
    nm = NormalMap(values.reshape(camera.height, camera.width, 3),
                   mask.reshape(camera.height, camera.width))
    nm.skipped_triangles = skipped
    return nm


# ---------------------------------------------------------------------------
# image output


def write_ppm(path, normal_map):
    """Binary P6, components mapped by (n + 1) / 2 * 255."""
    import os

    img = ((normal_map.values + 1.0) * 0.5 * 255.0).round().clip(0, 255).astype(np.uint8)
    img[~normal_map.mask] = 0
    h, w = img.shape[:2]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    os.replace(tmp, path)


def write_raw_f32(path, normal_map):
    """Row-major little-endian float32 H*W*3 values."""
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(np.ascontiguousarray(normal_map.values, dtype="<f4").tobytes())
    os.replace(tmp, path)
