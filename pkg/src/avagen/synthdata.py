"""Synthetic scan generation with closed-form oracles.

A synthetic subject is a union of capsules around the skeleton bones,
inflated by per-bone garment offsets and perturbed by a procedural
sinusoidal wrinkle field. Everything about the subject is analytic:
occupancy (inside/outside), surface points with bump-mapped normals,
skinning weights (softmax of negative bone distance), and a per-bone
warping map between body sizes. Posed-space ground truth composes the
canonical oracle with the oracle's own blend-of-rigid-transforms
deformation, inverted numerically to machine precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError, FileLengthError, FileVersionError
from .skeleton import (
    BodyParams,
    N_SIZE,
    bone_transforms,
    point_to_segments,
    segment_frames,
)
from .skinning import apply_inverse_transpose, blend_rotation, correspondence_search, lbs_blend

WEIGHT_SHARPNESS = 30.0  # 1/m falloff of the oracle skinning weights
_FADE_BAND = 0.2         # wrinkles fade to zero near the capsule caps

SCAN_MAGIC = b"GDNS"
SCAN_VERSION = 1


@dataclass
class SyntheticSubject:
    skeleton: object
    subject_id: int
    garment: np.ndarray        # (n_b,) radial offsets, meters
    wrinkle_amp: np.ndarray    # (n_b,)
    wrinkle_freq_t: np.ndarray   # (n_b,) cycles along the bone
    wrinkle_freq_psi: np.ndarray  # (n_b,) integer azimuthal cycles
    wrinkle_phase_t: np.ndarray
    wrinkle_phase_psi: np.ndarray

    def body_radii(self, beta):
        return self.skeleton.radii(beta) + self.garment


@dataclass
class Scan:
    subject_id: int
    bp: BodyParams
    occ_points: np.ndarray   # (n_occ, 3) posed space
    occ_labels: np.ndarray   # (n_occ,) in {0, 1}
    surf_points: np.ndarray  # (n_surf, 3) posed space
    surf_normals: np.ndarray  # (n_surf, 3) unit

    def __post_init__(self):
        assert set(np.unique(self.occ_labels)) <= {0.0, 1.0}
        assert np.all(np.isfinite(self.occ_points)) and np.all(np.isfinite(self.surf_points))
        nrm = np.linalg.norm(self.surf_normals, axis=-1)
        assert np.allclose(nrm, 1.0, atol=1e-9)


def generate_subject(seed, skeleton):
    """Deterministic subject from a seed: garment widths and wrinkle field."""
    rng = np.random.default_rng(seed)
    n_b = skeleton.n_bones
    garment = rng.uniform(0.004, 0.028, n_b)
    amp = np.minimum(rng.uniform(0.004, 0.009, n_b), 0.09 * skeleton.radius_base)
    return SyntheticSubject(
        skeleton=skeleton,
        subject_id=int(seed),
        garment=garment,
        wrinkle_amp=amp,
        wrinkle_freq_t=rng.integers(2, 5, n_b).astype(np.float64),
        wrinkle_freq_psi=rng.integers(3, 7, n_b).astype(np.float64),
        wrinkle_phase_t=rng.uniform(0, 2 * np.pi, n_b),
        wrinkle_phase_psi=rng.uniform(0, 2 * np.pi, n_b),
    )


# ---------------------------------------------------------------------------
# canonical oracles


def _fade(t):
    m = np.clip(np.minimum(t, 1.0 - t) / _FADE_BAND, 0.0, 1.0)
    return m * m * (3.0 - 2.0 * m)


def wrinkle(subject, t, psi):
    """Radial wrinkle displacement on the (axial, azimuthal) chart; (..., n_b)."""
    s = subject
    return (
        s.wrinkle_amp
        * _fade(t)
        * np.sin(2 * np.pi * s.wrinkle_freq_t * t + s.wrinkle_phase_t)
        * np.sin(s.wrinkle_freq_psi * psi + s.wrinkle_phase_psi)
    )


def _bone_charts(subject, pts, beta):
    """Distance, axial parameter, azimuth, and frames per bone."""
    sk = subject.skeleton
    joints, tips = sk.joints(beta), sk.tips(beta)
    dist, t, foot = point_to_segments(pts, joints, tips)
    u, e1, e2, length = segment_frames(joints, tips)
    rel = np.atleast_2d(pts)[:, None, :] - foot
    psi = np.arctan2(np.einsum("nbd,bd->nb", rel, e2), np.einsum("nbd,bd->nb", rel, e1))
    return dist, t, psi, (joints, tips, u, e1, e2, length)


def surface_margin(subject, pts, beta):
    """Signed distance-like margin to the clothed body at size beta.

    Negative inside. min over bones of (distance - effective radius).
    """
    dist, t, psi, _ = _bone_charts(subject, np.atleast_2d(pts), beta)
    eff = subject.body_radii(beta)[None, :] + wrinkle(subject, t, psi)
    return (dist - eff).min(axis=1)


def occupancy_oracle(subject, pts, beta):
    """Binary occupancy of the clothed body at size beta."""
    return (surface_margin(subject, pts, beta) <= 0.0).astype(np.float64)


def weights_oracle(subject, pts):
    """Softmax of negative distance to the size-neutral bones."""
    sk = subject.skeleton
    beta0 = np.zeros(N_SIZE)
    dist, _, _ = point_to_segments(np.atleast_2d(pts), sk.joints(beta0), sk.tips(beta0))
    logits = -WEIGHT_SHARPNESS * dist
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def warp_oracle(subject, pts, beta):
    """Blend of per-bone chart maps carrying size-beta points to neutral."""
    sk = subject.skeleton
    pts = np.atleast_2d(pts)
    beta0 = np.zeros(N_SIZE)
    j_b, t_b = sk.joints(beta), sk.tips(beta)
    j_0, t_0 = sk.joints(beta0), sk.tips(beta0)
    r_b = subject.body_radii(beta)
    r_0 = subject.body_radii(beta0)
    dist, t, foot = point_to_segments(pts, j_b, t_b)
    # per-bone image: same axial fraction, radial part scaled by radius ratio
    foot0 = j_0[None] + t[..., None] * (t_0 - j_0)[None]
    scale = (r_0 / r_b)[None, :, None]
    mapped = foot0 + scale * (pts[:, None, :] - foot)
    logits = -WEIGHT_SHARPNESS * dist
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    return np.einsum("nb,nbd->nd", w, mapped)


def deform_oracle(subject, x_hat, bp, mats=None):
    """Forward deformation with oracle weights/warp (independent blend
    arithmetic, kept free of the learned-field code path)."""
    mats = mats if mats is not None else bone_transforms(subject.skeleton, bp).mats
    x_neutral = warp_oracle(subject, np.atleast_2d(x_hat), bp.beta)
    w = weights_oracle(subject, x_neutral)
    pts = np.atleast_2d(x_hat)
    hom = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    out = np.zeros_like(pts)
    for b in range(subject.skeleton.n_bones):
        out += w[:, b : b + 1] * (hom @ mats[b, :3, :].T)
    return out


def posed_margin_oracle(subject, x_prime, bp, mats=None, tol=1e-8, max_iter=40):
    """Margin of posed-space points: invert the oracle deformation, then
    evaluate the canonical margin at the best root. Points with no root
    are far outside (margin +inf)."""
    mats = mats if mats is not None else bone_transforms(subject.skeleton, bp).mats
    xp = np.atleast_2d(x_prime)

    def deform_fn(xh):
        return deform_oracle(subject, xh, bp, mats)

    roots, conv, _, _ = correspondence_search(
        xp, mats, deform_fn, subject.skeleton.n_bones, tol=tol, max_iter=max_iter
    )
    n = xp.shape[0]
    margin = np.full(n, np.inf)
    flat_valid = conv.reshape(-1)
    if flat_valid.any():
        cand = roots.reshape(-1, 3)[flat_valid]
        m = surface_margin(subject, cand, bp.beta)
        m_all = np.full(n * subject.skeleton.n_bones, np.inf)
        m_all[flat_valid] = m
        margin = m_all.reshape(n, -1).min(axis=1)
    return margin


def posed_occupancy_oracle(subject, x_prime, bp, mats=None):
    return (posed_margin_oracle(subject, x_prime, bp, mats) <= 0.0).astype(np.float64)


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(subject, beta, n, rng):
    """Canonical surface points at size beta with bump-mapped normals.

    Cylindrical charts with analytic tangents; points swallowed by a
    neighboring capsule are rejected. Returns (points, normals).
    """
    sk = subject.skeleton
    joints, tips = sk.joints(beta), sk.tips(beta)
    u, e1, e2, length = segment_frames(joints, tips)
    base_r = subject.body_radii(beta)
    s = subject
    pts_out, nrm_out = [], []
    budget = 0
    while sum(len(p) for p in pts_out) < n and budget < 20:
        budget += 1
        m = 2 * n
        b = rng.integers(0, sk.n_bones, m)
        t = rng.uniform(0.0, 1.0, m)
        psi = rng.uniform(0.0, 2 * np.pi, m)
        amp, ft, fp = s.wrinkle_amp[b], s.wrinkle_freq_t[b], s.wrinkle_freq_psi[b]
        pt_, pp_ = s.wrinkle_phase_t[b], s.wrinkle_phase_psi[b]
        fade = _fade(t)
        dm = np.clip(np.minimum(t, 1.0 - t) / _FADE_BAND, 0.0, 1.0)
        dfade_dt = np.where((dm > 0) & (dm < 1), 6.0 * dm * (1.0 - dm) / _FADE_BAND, 0.0)
        dfade_dt *= np.where(t < 0.5, 1.0, -1.0)
        st = np.sin(2 * np.pi * ft * t + pt_)
        ct = np.cos(2 * np.pi * ft * t + pt_)
        sp = np.sin(fp * psi + pp_)
        cp = np.cos(fp * psi + pp_)
        rho = base_r[b] + amp * fade * st * sp
        rho_t = amp * (dfade_dt * st + fade * 2 * np.pi * ft * ct) * sp
        rho_psi = amp * fade * st * fp * cp
        e = np.cos(psi)[:, None] * e1[b] + np.sin(psi)[:, None] * e2[b]
        eprime = -np.sin(psi)[:, None] * e1[b] + np.cos(psi)[:, None] * e2[b]
        foot = joints[b] + t[:, None] * (tips[b] - joints[b])
        pts = foot + rho[:, None] * e
        ll = length[b]
        n_raw = (ll * rho)[:, None] * e - (ll * rho_psi)[:, None] * eprime - (rho_t * rho)[:, None] * u[b]
        n_unit = n_raw / np.linalg.norm(n_raw, axis=1, keepdims=True)
        # reject points inside any other bone's capsule
        dist, tt, psis, _ = _bone_charts(subject, pts, beta)
        eff = subject.body_radii(beta)[None, :] + wrinkle(subject, tt, psis)
        inside = dist < eff - 1e-9
        inside[np.arange(m), b] = False
        keep = ~inside.any(axis=1)
        pts_out.append(pts[keep])
        nrm_out.append(n_unit[keep])
    pts = np.concatenate(pts_out)[:n]
    nrm = np.concatenate(nrm_out)[:n]
    if pts.shape[0] < n:
        raise RuntimeError("surface sampling starved; subject geometry degenerate")
    return pts, nrm


def posed_bbox(subject, bp, pad=0.15):
    bt = bone_transforms(subject.skeleton, bp)
    joints, tips = subject.skeleton.joints(bp.beta), subject.skeleton.tips(bp.beta)
    from .skeleton import apply_transform

    ends = []
    for b in range(subject.skeleton.n_bones):
        ends.append(apply_transform(bt.mats[b], np.stack([joints[b], tips[b]])))
    ends = np.concatenate(ends)
    r = subject.body_radii(bp.beta).max() + pad
    return np.stack([ends.min(axis=0) - r, ends.max(axis=0) + r])


def sample_scan(subject, bp, n_occ, n_surf, seed):
    """One labeled posed scan of a subject.

    Occupancy points mix uniform box samples with near-surface samples;
    every label comes from the posed oracle (inversion + canonical
    margin), not from the sampling heuristic. Surface points carry
    rotation-blended, wrinkle-perturbed unit normals.
    """
    rng = np.random.default_rng(seed)
    bt = bone_transforms(subject.skeleton, bp)
    mats = bt.mats

    x_can, n_can = sample_surface(subject, bp.beta, max(n_surf, n_occ // 2), rng)
    x_posed = deform_oracle(subject, x_can, bp, mats)
    w = weights_oracle(subject, warp_oracle(subject, x_can, bp.beta))
    blends = blend_rotation(w, bt.rotations)
    n_posed = apply_inverse_transpose(blends, n_can)

    box = posed_bbox(subject, bp)
    n_uni = n_occ // 2
    uni = rng.uniform(box[0], box[1], size=(n_uni, 3))
    near_idx = rng.integers(0, x_posed.shape[0], n_occ - n_uni)
    near = x_posed[near_idx] + n_posed[near_idx] * rng.normal(0.0, 0.02, (n_occ - n_uni, 1))
    occ_pts = np.concatenate([uni, near])
    labels = posed_occupancy_oracle(subject, occ_pts, bp, mats)

    return Scan(
        subject_id=subject.subject_id,
        bp=bp,
        occ_points=occ_pts,
        occ_labels=labels,
        surf_points=x_posed[:n_surf],
        surf_normals=n_posed[:n_surf],
    )


# ---------------------------------------------------------------------------
# scan file format: magic, u32 version, u32 subject id, u32 joint count,
# 10 f64 beta, n_joints*3 f64 theta, u64 occupancy count, u64 surface count,
# then f64 records (x,y,z,label) and (x,y,z,nx,ny,nz)


def save_scan(scan, path):
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(SCAN_MAGIC)
        n_joints = scan.bp.theta.shape[0]
        fh.write(struct.pack("<III", SCAN_VERSION, scan.subject_id, n_joints))
        fh.write(np.ascontiguousarray(scan.bp.beta, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(scan.bp.theta, dtype="<f8").tobytes())
        fh.write(struct.pack("<QQ", scan.occ_points.shape[0], scan.surf_points.shape[0]))
        occ = np.concatenate([scan.occ_points, scan.occ_labels[:, None]], axis=1)
        surf = np.concatenate([scan.surf_points, scan.surf_normals], axis=1)
        fh.write(np.ascontiguousarray(occ, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(surf, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_scan(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SCAN_MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {SCAN_MAGIC!r}")
    version, subject_id, n_joints = struct.unpack_from("<III", blob, 4)
    if version != SCAN_VERSION:
        raise FileVersionError(f"scan version {version}, supported {SCAN_VERSION}")
    pos = 16
    need = N_SIZE * 8 + n_joints * 3 * 8 + 16
    if pos + need > len(blob):
        raise FileLengthError("scan header", need, len(blob) - pos)
    beta = np.frombuffer(blob, dtype="<f8", count=N_SIZE, offset=pos).astype(np.float64)
    pos += N_SIZE * 8
    theta = np.frombuffer(blob, dtype="<f8", count=n_joints * 3, offset=pos).astype(np.float64)
    pos += n_joints * 3 * 8
    n_occ, n_surf = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    expect = n_occ * 4 + n_surf * 6
    have = (len(blob) - pos) // 8
    if have < expect:
        raise FileLengthError("scan records", expect, have)
    occ = np.frombuffer(blob, dtype="<f8", count=n_occ * 4, offset=pos).astype(np.float64)
    pos += n_occ * 4 * 8
    surf = np.frombuffer(blob, dtype="<f8", count=n_surf * 6, offset=pos).astype(np.float64)
    occ = occ.reshape(n_occ, 4)
    surf = surf.reshape(n_surf, 6)
    return Scan(
        subject_id=subject_id,
        bp=BodyParams(beta, theta.reshape(n_joints, 3)),
        occ_points=occ[:, :3].copy(),
        occ_labels=occ[:, 3].copy(),
        surf_points=surf[:, :3].copy(),
        surf_normals=surf[:, 3:].copy(),
    )


def random_pose(skeleton, rng, max_angle=0.9, root_angle=0.3):
    """Random axis-angle pose within joint limits; root barely moves."""
    theta = np.zeros((skeleton.n_bones, 3))
    for b in range(skeleton.n_bones):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(-root_angle if skeleton.parent[b] < 0 else -max_angle,
                          root_angle if skeleton.parent[b] < 0 else max_angle)
        theta[b] = axis * ang
    return theta


def generate_dataset(skeleton, n_subjects, poses_per_subject, n_occ, n_surf, seed,
                     beta_scale=1.0, max_angle=0.9):
    """N x P scans with deterministic per-scan seeds."""
    rng = np.random.default_rng(seed)
    scans = []
    subjects = []
    for s in range(n_subjects):
        subject_seed = seed * 1000 + s
        subject = generate_subject(subject_seed, skeleton)
        subjects.append(subject)
        for p in range(poses_per_subject):
            beta = np.clip(rng.normal(0.0, beta_scale, N_SIZE), -2.5, 2.5)
            theta = random_pose(skeleton, rng, max_angle=max_angle)
            bp = BodyParams(beta, theta)
            scans.append(sample_scan(subject, bp, n_occ, n_surf, seed=rng.integers(2**31)))
    return subjects, scans
