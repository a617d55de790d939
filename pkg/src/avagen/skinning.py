"""Forward skinning across subjects and its numerical inverse.

A point in beta-sized canonical space deforms to posed space by a
simplex blend of bone transforms; blend weights are evaluated in the
size-neutral frame reached through the warping field. Posed-space
queries invert the deformation numerically: one rigid initialization per
bone feeds a batched Broyden solve, surviving roots are deduplicated,
and the posed occupancy is the maximum canonical occupancy over valid
roots. Gradients pass through the root via the implicit function
theorem rather than by unrolling solver iterations.

The engine-level functions take plain callables so tests (and the
synthetic-data oracles) can substitute analytic fields for the learned
ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import canonical
from .diffnum import broyden_solve_batch, mlp_forward, mlp_forward_var, tape
from .diffnum.tape import Var, backward
from .errors import SingularBlend
from .skeleton import bone_transforms

CORR_TOL = 1e-5      # residual tolerance, canonical meters
DEDUP_RADIUS = 1e-4  # roots closer than this are one pre-image
MAX_ITER = 30


@dataclass
class Correspondence:
    x_hat_star: np.ndarray
    x_star: np.ndarray
    residual: float
    valid: bool
    init_bone: int
    iters: int = 0


@dataclass
class DeformFields:
    """Callable bundle the deformation engine runs on.

    weight_fn: (N,3) size-neutral points -> (N, n_b) simplex weights
    warp_fn:   (N,3) beta-sized points, beta -> (N,3) neutral points
    occ_fn:    (N,3) neutral points -> (o (N,), f (N, l_f))
    """

    weight_fn: Callable
    warp_fn: Callable
    occ_fn: Callable
    n_b: int


# ---------------------------------------------------------------------------
# learned-field evaluation


def skin_weights(model, x, z):
    """Simplex skinning weights at size-neutral canonical points."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = mlp_forward(model.specs["skin"], model.geo, x, np.asarray(z, dtype=np.float64))
    return w[0] if single else w


def warp(model, x_hat, beta):
    """Map beta-sized canonical points to the size-neutral frame.

    Residual form x + r(x, beta); the residual head starts at zero, so a
    fresh model warps identically.
    """
    single = np.ndim(x_hat) == 1
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    res = mlp_forward(model.specs["warp"], model.geo, x_hat, np.asarray(beta, dtype=np.float64))
    out = x_hat + res
    return out[0] if single else out


def warp_var(model, x_hat, beta, trainable=True):
    x_hat = x_hat if isinstance(x_hat, Var) else Var(np.atleast_2d(x_hat))
    res = mlp_forward_var(model.specs["warp"], model.geo, x_hat,
                          Var(np.asarray(beta, dtype=np.float64)), trainable=trainable)
    return x_hat + res


def skin_weights_var(model, x, z, trainable=True):
    return mlp_forward_var(model.specs["skin"], model.geo, x, z, trainable=trainable)


def model_fields(model, z):
    """Learned DeformFields for one shape code."""
    return DeformFields(
        weight_fn=lambda x: skin_weights(model, x, z),
        warp_fn=lambda xh, beta: warp(model, xh, beta),
        occ_fn=lambda x: canonical.occupancy(model, x, z),
        n_b=model.arch.n_b,
    )


# ---------------------------------------------------------------------------
# deformation engine (Eq. of motion for every module downstream)


def lbs_blend(weights, mats, points):
    """Weighted blend of per-bone rigid transforms applied to points."""
    pts = np.atleast_2d(points)
    per_bone = np.einsum("bij,nj->nbi", mats[:, :3, :3], pts) + mats[None, :, :3, 3]
    return np.einsum("nb,nbi->ni", weights, per_bone)


def deform_points(fields, x_hat, beta, mats):
    """Forward deformation of beta-sized canonical points to posed space."""
    x_neutral = fields.warp_fn(np.atleast_2d(x_hat), beta)
    w = fields.weight_fn(x_neutral)
    return lbs_blend(w, mats, x_hat)


def forward_deform(model, x_hat, bp, z, bt=None):
    """Learned-field forward deformation (posed point for a canonical one)."""
    single = np.ndim(x_hat) == 1
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    out = deform_points(model_fields(model, z), x_hat, bp.beta, bt.mats)
    return out[0] if single else out


def forward_deform_var(model, x_hat, bp, z, bt=None, trainable=True):
    """Graph-mode deformation; differentiable in x_hat, fields, and z."""
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    x_hat = x_hat if isinstance(x_hat, Var) else Var(np.atleast_2d(x_hat))
    n = x_hat.value.shape[0]
    n_b = model.arch.n_b
    x_neutral = warp_var(model, x_hat, bp.beta, trainable=trainable)
    z = z if isinstance(z, Var) else Var(np.asarray(z, dtype=np.float64))
    if not trainable:
        z = Var(z.value)
    w = skin_weights_var(model, x_neutral, z, trainable=trainable)
    # one constant matmul gives all per-bone images: (N,4) @ (4, n_b*3)
    hom = tape.concat([x_hat, Var(np.ones((n, 1)))], axis=-1)
    big = np.concatenate([bt.mats[b, :3, :].T for b in range(n_b)], axis=1)  # (4, n_b*3)
    per_bone = tape.reshape(tape.matmul(hom, Var(big)), (n, n_b, 3))
    wexp = tape.reshape(w, (n, n_b, 1))
    return tape.vsum(per_bone * wexp, axis=1)


# ---------------------------------------------------------------------------
# correspondence search


def correspondence_search(x_prime, mats, deform_fn, n_b, tol=CORR_TOL, max_iter=MAX_ITER):
    """Invert the deformation for a batch of posed points.

    One initialization per bone (rigid inverse of that bone's transform);
    returns roots (N, n_b, 3), valid (N, n_b), residual (N, n_b),
    iters (N, n_b).
    """
    xp = np.atleast_2d(np.asarray(x_prime, dtype=np.float64))
    n = xp.shape[0]
    rot_t = np.transpose(mats[:, :3, :3], (0, 2, 1))
    trans = mats[:, :3, 3]
    # init[i, b] = B_b^-1 x'_i
    init = np.einsum("bij,nbj->nbi", rot_t, xp[:, None, :] - trans[None])
    targets = np.repeat(xp, n_b, axis=0)

    def residual(xh, rows):
        return deform_fn(xh) - targets[rows]

    roots, conv, resid, iters = broyden_solve_batch(
        residual, init.reshape(-1, 3), tol=tol, max_iter=max_iter
    )
    return (
        roots.reshape(n, n_b, 3),
        conv.reshape(n, n_b),
        resid.reshape(n, n_b),
        iters.reshape(n, n_b),
    )


def correspondence_batch(model, x_prime, bp, z, tol=CORR_TOL, max_iter=MAX_ITER, bt=None):
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    fields = model_fields(model, z)

    def deform_fn(xh):
        return deform_points(fields, xh, bp.beta, bt.mats)

    return correspondence_search(x_prime, bt.mats, deform_fn, model.arch.n_b, tol, max_iter)


def _dedup(roots, order):
    """Indices of `order` whose roots are not within DEDUP_RADIUS of a kept one."""
    kept = []
    for i in order:
        if all(np.linalg.norm(roots[i] - roots[j]) > DEDUP_RADIUS for j in kept):
            kept.append(i)
    return kept


def canonical_correspondence(model, x_prime, bp, z, tol=CORR_TOL, max_iter=MAX_ITER):
    """All canonical pre-images of one posed point, deduplicated.

    Every search failure just drops that initialization; an empty list
    means posed free space.
    """
    roots, conv, resid, iters = correspondence_batch(model, x_prime, bp, z, tol, max_iter)
    roots, conv, resid, iters = roots[0], conv[0], resid[0], iters[0]
    valid_idx = [b for b in range(model.arch.n_b) if conv[b]]
    out = []
    for b in _dedup(roots, valid_idx):
        x_star = warp(model, roots[b], bp.beta)
        out.append(
            Correspondence(
                x_hat_star=roots[b],
                x_star=x_star,
                residual=float(resid[b]),
                valid=True,
                init_bone=b,
                iters=int(iters[b]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# posed fields


def posed_fields_batch(fields, x_prime, beta, mats, tol=CORR_TOL, max_iter=MAX_ITER):
    """Posed occupancy over a batch, plus per-point best root bookkeeping.

    Returns dict with o (N,), f (N,l_f), root (N,3), x_star (N,3),
    has_root (N,), all zeros where no initialization converged.
    """
    xp = np.atleast_2d(np.asarray(x_prime, dtype=np.float64))
    n = xp.shape[0]

    def deform_fn(xh):
        return deform_points(fields, xh, beta, mats)

    roots, conv, resid, iters = correspondence_search(xp, mats, deform_fn, fields.n_b, tol, max_iter)
    o = np.zeros(n)
    root_sel = np.zeros((n, 3))
    xstar_sel = np.zeros((n, 3))
    has = conv.any(axis=1)
    f = None
    if has.any():
        flat_valid = conv.reshape(-1)
        cand = roots.reshape(-1, 3)[flat_valid]
        xstar = fields.warp_fn(cand, beta)
        o_cand, f_cand = fields.occ_fn(xstar)
        o_all = np.full((n * fields.n_b,), -np.inf)
        o_all[flat_valid] = o_cand
        o_all = o_all.reshape(n, fields.n_b)
        best = np.argmax(o_all, axis=1)
        o = np.where(has, o_all[np.arange(n), best], 0.0)
        root_sel = np.where(has[:, None], roots[np.arange(n), best], 0.0)
        # map back to candidate rows to pick features
        flat_best = np.arange(n) * fields.n_b + best
        cand_pos = np.full(n * fields.n_b, -1, dtype=np.int64)
        cand_pos[flat_valid] = np.arange(flat_valid.sum())
        f = np.zeros((n, f_cand.shape[1]))
        ok = has & (cand_pos[flat_best] >= 0)
        f[ok] = f_cand[cand_pos[flat_best[ok]]]
        xstar_sel[ok] = xstar[cand_pos[flat_best[ok]]]
    if f is None:
        probe = fields.occ_fn(np.zeros((1, 3)))[1]
        f = np.zeros((n, probe.shape[1]))
    return {
        "o": o,
        "f": f,
        "root": root_sel,
        "x_star": xstar_sel,
        "has_root": has,
        "iters": iters,
        "converged": conv,
        "residual": resid,
    }


def posed_occupancy_batch(model, x_prime, bp, z, bt=None, tol=CORR_TOL, max_iter=MAX_ITER):
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    return posed_fields_batch(model_fields(model, z), x_prime, bp.beta, bt.mats, tol, max_iter)


def posed_occupancy(model, x_prime, bp, z):
    """Spec surface: occupancy and feature of one posed point."""
    out = posed_occupancy_batch(model, np.atleast_2d(x_prime), bp, z)
    return float(out["o"][0]), out["f"][0]


def blend_rotation(weights, rotations):
    """(N, n_b) weights x (n_b, 3, 3) rotations -> (N, 3, 3) blends."""
    return np.einsum("nb,bij->nij", np.atleast_2d(weights), rotations)


def posed_normal(model, x_star, zd, f, bp, z, bt=None):
    """Detail normal carried to posed space: inverse-transpose of the
    weight-blended rotation applied to the canonical normal."""
    single = np.ndim(x_star) == 1
    xs = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    n_can = canonical.normal(model, xs, zd, np.atleast_2d(f))
    a = blend_rotation(skin_weights(model, xs, z), bt.rotations)
    n_posed = apply_inverse_transpose(a, n_can)
    return n_posed[0] if single else n_posed


def apply_inverse_transpose(blends, normals):
    """Solve A^T y = n rowwise and renormalize; raises on singular blends."""
    conds = np.linalg.cond(blends)
    if np.any(conds > 1e8):
        raise SingularBlend(f"blended rotation condition number {conds.max():.3e}")
    y = np.linalg.solve(np.transpose(blends, (0, 2, 1)), normals[..., None])[..., 0]
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# gradients through the root (implicit function theorem)


def occupancy_at_roots_var(model, roots, bp, z_var):
    """Graph for O(M(root)) with the root as a leaf.

    Returns (o Var (N,), f Var, root_leaf). After backward() the leaf's
    grad is dL/droot, which ift_backprop() converts into parameter and
    latent gradients through the solved system.
    """
    root_leaf = Var(np.atleast_2d(roots))
    x_star = warp_var(model, root_leaf, bp.beta)
    o, f = canonical.occupancy_var(model, x_star, z_var)
    return o, f, root_leaf


def deform_jacobians(model, roots, bp, z, bt=None):
    """Exact Jacobians of the deformation at given points, via three
    reverse passes over a constant-parameter graph."""
    bt = bt if bt is not None else bone_transforms(model.skeleton, bp)
    leaf = Var(np.atleast_2d(roots))
    d = forward_deform_var(model, leaf, bp, z, bt=bt, trainable=False)
    n = leaf.value.shape[0]
    jac = np.zeros((n, 3, 3))
    for k in range(3):
        seed = np.zeros((n, 3))
        seed[:, k] = 1.0
        backward(d, seed=seed)
        jac[:, k, :] = leaf.grad  # row k of J (leaf.grad = J^T e_k)
    return jac


def ift_backprop(model, roots, grad_roots, bp, z_var, bt=None):
    """Push dL/droot through the root-finding layer into parameters.

    Solves J^T v = dL/droot per point with the exact Jacobian at the
    root, then back-propagates -v through the deformation graph with the
    root held fixed. z_var should be the same latent leaf used in the
    occupancy graph so its implicit gradient lands in the same place.
    """
    roots = np.atleast_2d(roots)
    jac = deform_jacobians(model, roots, bp, z_var.value, bt=bt)
    v = np.linalg.solve(np.transpose(jac, (0, 2, 1)), np.atleast_2d(grad_roots)[..., None])[..., 0]
    d = forward_deform_var(model, Var(roots), bp, z_var, bt=bt, trainable=True)
    backward(d, seed=-v)
