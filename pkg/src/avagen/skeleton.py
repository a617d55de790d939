"""Parametric articulated skeleton: bones, size model, forward kinematics.

The skeleton is a tree of bones. Each bone owns a joint (its origin), a
tip, and a capsule radius; joints, tips, and radii are affine in a
10-dimensional size vector beta. bone_transforms() produces the 4x4
matrices that carry rest-pose points (at size beta) to the posed frame,
so theta = 0 yields identities regardless of beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

N_SIZE = 10  # dimension of the size vector


@dataclass
class Skeleton:
    parent: np.ndarray            # (n_b,) int, -1 for the root
    joint_base: np.ndarray        # (n_b, 3)
    joint_dirs: np.ndarray        # (n_b, N_SIZE, 3)
    tip_base: np.ndarray          # (n_b, 3)
    tip_dirs: np.ndarray          # (n_b, N_SIZE, 3)
    radius_base: np.ndarray       # (n_b,)
    radius_dirs: np.ndarray       # (n_b, N_SIZE)
    names: tuple = ()

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        for attr in ("joint_base", "joint_dirs", "tip_base", "tip_dirs", "radius_base", "radius_dirs"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.float64))
        if self.n_bones < 2:
            raise DimensionMismatch("skeleton", ">= 2 bones", self.n_bones)
        # parent relation must be a tree rooted at -1
        seen_root = False
        for i, p in enumerate(self.parent):
            if p < 0:
                seen_root = True
            elif p >= i:
                raise DimensionMismatch("skeleton.parent", "topologically sorted tree", f"bone {i} -> {p}")
        if not seen_root:
            raise DimensionMismatch("skeleton.parent", "one root", "none")
        if not all(np.all(np.isfinite(getattr(self, a))) for a in ("joint_base", "tip_base")):
            raise DimensionMismatch("skeleton", "finite offsets", "non-finite")

    @property
    def n_bones(self):
        return int(self.parent.shape[0])

    def joints(self, beta):
        """Joint positions at size beta: base + sum_k beta_k * dir_k."""
        beta = np.asarray(beta, dtype=np.float64)
        return self.joint_base + np.einsum("k,bkd->bd", beta, self.joint_dirs)

    def tips(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        return self.tip_base + np.einsum("k,bkd->bd", beta, self.tip_dirs)

    def radii(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        return self.radius_base + self.radius_dirs @ beta

    def max_reach(self, beta_mag=3.0, pad=0.0):
        """Axis-aligned box covering the capsule body for |beta_k| <= beta_mag."""
        slack_j = beta_mag * np.abs(self.joint_dirs).sum(axis=1)
        slack_t = beta_mag * np.abs(self.tip_dirs).sum(axis=1)
        slack_r = beta_mag * np.abs(self.radius_dirs).sum(axis=1)
        r = (self.radius_base + slack_r)[:, None]
        lo = np.minimum(self.joint_base - slack_j - r, self.tip_base - slack_t - r).min(axis=0)
        hi = np.maximum(self.joint_base + slack_j + r, self.tip_base + slack_t + r).max(axis=0)
        return np.stack([lo - pad, hi + pad])


@dataclass
class BodyParams:
    """Size coefficients and per-joint axis-angle rotations."""

    beta: np.ndarray   # (N_SIZE,)
    theta: np.ndarray  # (n_b, 3) axis-angle, radians

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_SIZE)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise DimensionMismatch("theta", "(n_b, 3)", self.theta.shape)
        if np.any(np.abs(self.beta) > 3.0 + 1e-12):
            raise DimensionMismatch("beta", "|beta_k| <= 3", float(np.abs(self.beta).max()))
        if not np.all(np.isfinite(self.theta)):
            raise DimensionMismatch("theta", "finite", "non-finite")

    @classmethod
    def rest(cls, n_bones, beta=None):
        b = np.zeros(N_SIZE) if beta is None else beta
        return cls(b, np.zeros((n_bones, 3)))


@dataclass
class BoneTransforms:
    mats: np.ndarray       # (n_b, 4, 4) rest-at-beta -> posed
    rotations: np.ndarray  # (n_b, 3, 3)
    joints_posed: np.ndarray  # (n_b, 3)

    def inverse_mats(self):
        inv = np.zeros_like(self.mats)
        rt = np.transpose(self.rotations, (0, 2, 1))
        inv[:, :3, :3] = rt
        inv[:, :3, 3] = -np.einsum("bij,bj->bi", rt, self.mats[:, :3, 3])
        inv[:, 3, 3] = 1.0
        return inv


def rodrigues(axis_angle):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = angle[..., 0] < 1e-12
    axis = np.where(small[..., None], np.array([1.0, 0.0, 0.0]), aa / np.where(angle < 1e-12, 1.0, angle))
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    a = angle[..., None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    rot = eye + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)
    rot = np.where(small[..., None, None], eye, rot)
    return rot[0] if single else rot


def bone_transforms(sk, bp):
    """Forward kinematics: per-bone matrices B_i mapping the size-beta rest
    pose into the posed frame. theta = 0 gives identities."""
    if bp.theta.shape[0] != sk.n_bones:
        raise DimensionMismatch("theta", f"({sk.n_bones}, 3)", bp.theta.shape)
    joints = sk.joints(bp.beta)
    rots = rodrigues(bp.theta)
    n = sk.n_bones
    world = np.zeros((n, 4, 4))
    for i in range(n):
        p = sk.parent[i]
        local = np.eye(4)
        local[:3, :3] = rots[i]
        if p < 0:
            local[:3, 3] = joints[i]
            world[i] = local
        else:
            local[:3, 3] = joints[i] - joints[p]
            world[i] = world[p] @ local
    mats = world.copy()
    # subtract the rest-frame joint so that rest points map through cleanly
    for i in range(n):
        undo = np.eye(4)
        undo[:3, 3] = -joints[i]
        mats[i] = world[i] @ undo
    return BoneTransforms(mats=mats, rotations=mats[:, :3, :3].copy(), joints_posed=world[:, :3, 3].copy())


def apply_transform(mats, points):
    """Homogeneous application of (4,4) or per-point (N,4,4) to (N,3)."""
    pts = np.atleast_2d(points)
    if mats.ndim == 2:
        return pts @ mats[:3, :3].T + mats[:3, 3]
    return np.einsum("nij,nj->ni", mats[:, :3, :3], pts) + mats[:, :3, 3]


# ---------------------------------------------------------------------------
# capsule geometry (shared by the template sampler and the synthetic oracles)


def segment_frames(joints, tips):
    """Per-bone unit axis and a deterministic orthonormal frame around it."""
    axis = tips - joints
    length = np.linalg.norm(axis, axis=-1, keepdims=True)
    u = axis / np.where(length == 0, 1.0, length)
    ref = np.where(np.abs(u[:, 0:1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(u, e1)
    return u, e1, e2, length[:, 0]


def point_to_segments(points, joints, tips):
    """Distances and axial parameters of points against every bone segment.

    Returns (dist (N, n_b), t (N, n_b) clamped to [0,1], foot (N, n_b, 3)).
    """
    pts = np.atleast_2d(points)
    seg = tips - joints
    seg_len2 = np.einsum("bd,bd->b", seg, seg)
    rel = pts[:, None, :] - joints[None, :, :]
    t = np.einsum("nbd,bd->nb", rel, seg) / np.where(seg_len2 == 0, 1.0, seg_len2)
    t = np.clip(t, 0.0, 1.0)
    foot = joints[None] + t[..., None] * seg[None]
    dist = np.linalg.norm(pts[:, None, :] - foot, axis=-1)
    return dist, t, foot


_TEMPLATE_RINGS = 7
_TEMPLATE_SPOKES = 8


def template_vertices(sk, beta):
    """Deterministic sample of the capsule body surface at size beta.

    Fixed parametric coordinates per bone (axial rings x azimuthal
    spokes, plus the two cap poles), so the vertex set is affine in beta
    and identical across calls.
    """
    joints = sk.joints(beta)
    tips = sk.tips(beta)
    radii = sk.radii(beta)
    u, e1, e2, _ = segment_frames(joints, tips)
    ts = np.linspace(0.0, 1.0, _TEMPLATE_RINGS)
    psis = np.arange(_TEMPLATE_SPOKES) * (2.0 * np.pi / _TEMPLATE_SPOKES)
    verts = []
    for b in range(sk.n_bones):
        ring_dirs = np.cos(psis)[:, None] * e1[b] + np.sin(psis)[:, None] * e2[b]
        for t in ts:
            center = joints[b] + t * (tips[b] - joints[b])
            verts.append(center + radii[b] * ring_dirs)
        verts.append((joints[b] - radii[b] * u[b])[None])
        verts.append((tips[b] + radii[b] * u[b])[None])
    return np.concatenate(verts, axis=0)


# ---------------------------------------------------------------------------
# default skeleton


def humanoid6():
    """Six-bone body: torso root, head, two arms, two legs. Meters, y-up."""
    parent = [-1, 0, 0, 0, 0, 0]
    names = ("torso", "head", "arm_l", "arm_r", "leg_l", "leg_r")
    joint = np.array(
        [
            [0.00, -0.30, 0.0],
            [0.00, 0.25, 0.0],
            [0.16, 0.18, 0.0],
            [-0.16, 0.18, 0.0],
            [0.10, -0.32, 0.0],
            [-0.10, -0.32, 0.0],
        ]
    )
    # bone axes stay axis-aligned under every size coefficient, so the
    # capsule frames (and hence the template sampling) are affine in beta
    tip = np.array(
        [
            [0.00, 0.25, 0.0],
            [0.00, 0.52, 0.0],
            [0.62, 0.18, 0.0],
            [-0.62, 0.18, 0.0],
            [0.10, -0.95, 0.0],
            [-0.10, -0.95, 0.0],
        ]
    )
    radius = np.array([0.140, 0.090, 0.055, 0.055, 0.075, 0.075])

    jd = np.zeros((6, N_SIZE, 3))
    td = np.zeros((6, N_SIZE, 3))
    rd = np.zeros((6, N_SIZE))
    # coefficient 0: overall scale
    jd[:, 0, :] = 0.05 * joint
    td[:, 0, :] = 0.05 * tip
    rd[:, 0] = 0.05 * radius
    # 1: height (vertical stretch)
    jd[:, 1, 1] = 0.04 * joint[:, 1]
    td[:, 1, 1] = 0.04 * tip[:, 1]
    # 2: width (lateral stretch)
    jd[:, 2, 0] = 0.05 * joint[:, 0]
    td[:, 2, 0] = 0.05 * tip[:, 0]
    # 3: girth (all radii)
    rd[:, 3] = 0.006
    # 4: arm length
    td[2, 4, 0] = 0.04
    td[3, 4, 0] = -0.04
    # 5: leg length
    td[4, 5, 1] = -0.05
    td[5, 5, 1] = -0.05
    # 6: head size
    rd[1, 6] = 0.006
    td[1, 6, 1] = 0.02
    # 7: torso girth
    rd[0, 7] = 0.008
    # 8: shoulder width
    jd[2, 8, 0] = 0.02
    jd[3, 8, 0] = -0.02
    td[2, 8, 0] = 0.02
    td[3, 8, 0] = -0.02
    # 9: limb girth
    rd[2:, 9] = 0.004
    return Skeleton(
        parent=parent,
        joint_base=joint,
        joint_dirs=jd,
        tip_base=tip,
        tip_dirs=td,
        radius_base=radius,
        radius_dirs=rd,
        names=names,
    )
