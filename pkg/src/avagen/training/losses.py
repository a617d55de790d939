"""Training objectives for both stages.

Stage 1 supervises posed occupancy through the correspondence search
(gradients via the implicit function theorem), guided early by bone and
joint auxiliaries, the size-warp anchor, and code regularization.
Stage 2 trains the detail normal field with a surface dot-product loss,
a non-saturating adversarial term on rendered normal maps, and detail
code regularization; the discriminator trains with softplus losses plus
an R1 gradient penalty on real maps.
"""

from __future__ import annotations

import numpy as np

from .. import canonical, renderer, skinning
from ..diffnum import backward, tape
from ..diffnum.tape import Var
from ..errors import TrainingDiverged
from ..skeleton import bone_transforms, template_vertices
from . import discriminator as disc_mod

CLAMP = 1e-7


def _softplus_np(x):
    return float(np.logaddexp(0.0, x))


def bce_var(o, labels):
    """Mean binary cross entropy; probabilities clamped before the log."""
    o = tape.clip(o, CLAMP, 1.0 - CLAMP)
    pos = tape.log(o) * Var(labels)
    neg = tape.log(Var(np.ones_like(labels)) - o) * Var(1.0 - labels)
    return -1.0 * tape.vmean(pos + neg)


def bce_value(o, labels):
    o = np.clip(o, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(labels * np.log(o) + (1 - labels) * np.log(1 - o)))


def joint_targets(skeleton):
    """Joint probe positions (size-neutral) and their 0.5/0.5 two-bone
    targets: each non-root bone's origin joins it to its parent."""
    import numpy as np

    beta0 = np.zeros(10)
    joints = skeleton.joints(beta0)
    pts, targets = [], []
    for b in range(skeleton.n_bones):
        p = skeleton.parent[b]
        if p < 0:
            continue
        t = np.zeros(skeleton.n_bones)
        t[b] = 0.5
        t[p] = 0.5
        pts.append(joints[b])
        targets.append(t)
    return np.asarray(pts), np.asarray(targets)


def sample_bone_points(skeleton, n, rng):
    beta0 = np.zeros(10)
    joints, tips = skeleton.joints(beta0), skeleton.tips(beta0)
    b = rng.integers(0, skeleton.n_bones, n)
    t = rng.uniform(0.0, 1.0, n)[:, None]
    return joints[b] + t * (tips[b] - joints[b])


def loss_stage1(model, scans, scan_ids, latents, cfg, rng, anneal=1.0):
    """Accumulate stage-1 gradients for a batch of scans.

    Returns (total, breakdown dict). Gradients land in model.geo.grad
    and latents.pv.grad; zeroing them is the caller's business.
    """
    breakdown = {"bce": 0.0, "bone": 0.0, "joint": 0.0, "warp": 0.0, "reg": 0.0}
    n_scans = len(scans)
    jpts, jtargets = joint_targets(model.skeleton)
    for scan, sid in zip(scans, scan_ids):
        bt = bone_transforms(model.skeleton, scan.bp)
        z_leaf = latents.shape_leaf(sid)
        take = rng.choice(scan.occ_points.shape[0], size=min(cfg.batch_points, scan.occ_points.shape[0]), replace=False)
        pts = scan.occ_points[take]
        labels = scan.occ_labels[take]

        out = skinning.posed_occupancy_batch(model, pts, scan.bp, z_leaf.value, bt=bt,
                                             tol=cfg.corr_tol, max_iter=cfg.corr_max_iter)
        has = out["has_root"]
        terms = []

        bce_const = 0.0
        if (~has).any():
            bce_const = bce_value(np.zeros((~has).sum()), labels[~has]) * (~has).sum() / len(labels)
        root_leaf = None
        if has.any():
            o, _, root_leaf = skinning.occupancy_at_roots_var(model, out["root"][has], scan.bp, z_leaf)
            bce_graph = bce_var(o, labels[has]) * (has.sum() / len(labels))
            terms.append(bce_graph)
            breakdown["bce"] += (float(bce_graph.value) + bce_const) / n_scans
        else:
            breakdown["bce"] += bce_const / n_scans

        if anneal > 0.0:
            xb = sample_bone_points(model.skeleton, cfg.n_bone_points, rng)
            ob, _ = canonical.occupancy_var(model, Var(xb), z_leaf)
            lbone = bce_var(ob, np.ones(len(xb)))
            terms.append((cfg.lambda_bone * anneal) * lbone)
            breakdown["bone"] += float(lbone.value) / n_scans

            wj = skinning.skin_weights_var(model, Var(jpts), z_leaf)
            diff = wj - Var(jtargets)
            ljoint = tape.vmean(tape.vsum(tape.square(diff), axis=-1))
            terms.append((cfg.lambda_joint * anneal) * ljoint)
            breakdown["joint"] += float(ljoint.value) / n_scans

        verts_b = template_vertices(model.skeleton, scan.bp.beta)
        verts_0 = template_vertices(model.skeleton, np.zeros(10))
        if cfg.n_template and cfg.n_template < len(verts_b):
            sel = rng.choice(len(verts_b), cfg.n_template, replace=False)
            verts_b, verts_0 = verts_b[sel], verts_0[sel]
        warped = skinning.warp_var(model, Var(verts_b), scan.bp.beta)
        lwarp = tape.vmean(tape.vsum(tape.square(warped - Var(verts_0)), axis=-1))
        terms.append(cfg.lambda_warp * lwarp)
        breakdown["warp"] += float(lwarp.value) / n_scans

        lreg = tape.vsum(tape.square(z_leaf))
        terms.append(cfg.lambda_reg * lreg)
        breakdown["reg"] += float(lreg.value) / n_scans

        total_var = terms[0]
        for t in terms[1:]:
            total_var = total_var + t
        total_var = (1.0 / n_scans) * total_var
        if not np.isfinite(total_var.value):
            raise TrainingDiverged(f"stage-1 loss non-finite: {breakdown}")
        backward(total_var)
        if root_leaf is not None and root_leaf.grad is not None:
            skinning.ift_backprop(model, out["root"][has], root_leaf.grad, scan.bp, z_leaf, bt=bt)

    total = breakdown["bce"] + anneal * (
        cfg.lambda_bone * breakdown["bone"] + cfg.lambda_joint * breakdown["joint"]
    ) + cfg.lambda_warp * breakdown["warp"] + cfg.lambda_reg * breakdown["reg"]
    return total, breakdown


def normal_loss_var(model, cache_pts, zd_leaf):
    """1 - n_gt . n_pred over cached frozen surface correspondences.

    cache_pts: dict with x_star, f, inv_t, n_gt (all constant arrays).
    """
    raw = canonical.normal_var(model, Var(cache_pts["x_star"]), zd_leaf, Var(cache_pts["f"]))
    n = tape.unitnorm(tape.rowmat(cache_pts["inv_t"], raw))
    dots = tape.vsum(n * Var(cache_pts["n_gt"]), axis=-1)
    return tape.vmean(Var(np.ones(len(dots.value))) - dots)


def loss_stage2_generator(model, batch, latents, dspec, dpv, cfg):
    """Normal + adversarial + detail-regularization; accumulates grads into
    model.normal_pv and the detail latents. batch: list of dicts with keys
    sid, surf (cached correspondence dict), geo (GeometryCache or None).

    Returns (total, breakdown).
    """
    breakdown = {"norm": 0.0, "adv": 0.0, "reg_detail": 0.0}
    n = len(batch)
    for item in batch:
        zd_leaf = latents.detail_leaf(item["sid"])
        terms = []
        lnorm = normal_loss_var(model, item["surf"], zd_leaf)
        terms.append(cfg.lambda_norm * lnorm)
        breakdown["norm"] += float(lnorm.value) / n

        if item.get("geo") is not None and item["geo"].hit_idx.size and cfg.lambda_adv > 0:
            img = renderer.shade_normals_var(model, item["geo"], zd_leaf)
            score = disc_mod.disc_score_var(dspec, dpv, img, trainable=False)
            ladv = tape.unary("softplus", -1.0 * score)
            terms.append(cfg.lambda_adv * ladv)
            breakdown["adv"] += float(ladv.value) / n

        lreg = tape.vsum(tape.square(zd_leaf))
        terms.append(cfg.lambda_reg_detail * lreg)
        breakdown["reg_detail"] += float(lreg.value) / n

        total_var = terms[0]
        for t in terms[1:]:
            total_var = total_var + t
        total_var = (1.0 / n) * total_var
        if not np.isfinite(total_var.value):
            raise TrainingDiverged(f"stage-2 generator loss non-finite: {breakdown}")
        backward(total_var)
    total = (cfg.lambda_norm * breakdown["norm"] + cfg.lambda_adv * breakdown["adv"]
             + cfg.lambda_reg_detail * breakdown["reg_detail"])
    return total, breakdown


def loss_stage2_discriminator(dspec, dpv, real_img, fake_img, cfg):
    """softplus(-D(real)) + softplus(D(fake)) + R1; accumulates dpv.grad."""
    s_real = disc_mod.disc_score_var(dspec, dpv, Var(real_img), trainable=True)
    l_real = tape.unary("softplus", -1.0 * s_real)
    backward(l_real)
    s_fake = disc_mod.disc_score_var(dspec, dpv, Var(fake_img), trainable=True)
    l_fake = tape.unary("softplus", s_fake)
    backward(l_fake)
    r1 = disc_mod.r1_penalty(dspec, dpv, real_img, cfg.gamma_r1)
    total = float(l_real.value) + float(l_fake.value) + r1
    if not np.isfinite(total):
        raise TrainingDiverged("discriminator loss non-finite")
    return total, {"d_real": float(l_real.value), "d_fake": float(l_fake.value), "r1": r1}
