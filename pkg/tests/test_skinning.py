"""Forward skinning, correspondence search, posed fields, root gradients."""

import numpy as np
import pytest

from avagen import canonical, skinning
from avagen.diffnum import backward, grad_check, tape
from avagen.diffnum.tape import Var
from avagen.model import new_model
from avagen.skeleton import BodyParams, N_SIZE, bone_transforms, humanoid6
from avagen.skinning import (
    DeformFields,
    canonical_correspondence,
    correspondence_search,
    deform_points,
    forward_deform,
    forward_deform_var,
    lbs_blend,
    posed_fields_batch,
    posed_normal,
    posed_occupancy,
    skin_weights,
    warp,
)


def rand_z(model, seed=0):
    return np.random.default_rng(seed).normal(size=model.arch.l_shape)


def rest_bp():
    return BodyParams.rest(6)


class TestWeightAndWarpFields:
    def test_weights_on_simplex_any_params(self, mini_model):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (200, 3))
        w = skin_weights(mini_model, x, rand_z(mini_model))
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_head_uniform_weights(self, fresh_model):
        x = np.random.default_rng(1).uniform(-1, 1, (20, 3))
        w = skin_weights(fresh_model, x, rand_z(fresh_model))
        np.testing.assert_allclose(w, 1.0 / 6.0, atol=1e-15)

    def test_weights_pose_independent_by_signature(self, mini_model):
        # the field takes no pose argument; same x, any pose bookkeeping
        # elsewhere, identical weights
        x = np.random.default_rng(2).uniform(-1, 1, (10, 3))
        z = rand_z(mini_model)
        w1 = skin_weights(mini_model, x, z)
        w2 = skin_weights(mini_model, x, z)
        np.testing.assert_array_equal(w1, w2)

    def test_fresh_warp_is_identity(self, fresh_model):
        x = np.random.default_rng(3).uniform(-1, 1, (15, 3))
        beta = np.random.default_rng(4).uniform(-2, 2, N_SIZE)
        np.testing.assert_array_equal(warp(fresh_model, x, beta), x)

    def test_warp_deterministic(self, mini_model):
        x = np.random.default_rng(5).uniform(-1, 1, (8, 3))
        beta = np.random.default_rng(6).uniform(-1, 1, N_SIZE)
        np.testing.assert_array_equal(warp(mini_model, x, beta), warp(mini_model, x, beta))


class TestForwardDeform:
    def test_identity_pose_is_identity(self, mini_model):
        x = np.random.default_rng(7).uniform(-0.5, 0.5, (12, 3))
        out = forward_deform(mini_model, x, rest_bp(), rand_z(mini_model))
        np.testing.assert_allclose(out, warp_identity_adjusted(mini_model, x), atol=1e-12)

    def test_stub_half_half_translation(self):
        mats = np.stack([np.eye(4), np.eye(4)])
        mats[1, 0, 3] = 1.0
        fields = DeformFields(
            weight_fn=lambda x: np.full((x.shape[0], 2), 0.5),
            warp_fn=lambda xh, beta: xh,
            occ_fn=None,
            n_b=2,
        )
        out = deform_points(fields, np.zeros((1, 3)), np.zeros(N_SIZE), mats)
        np.testing.assert_allclose(out[0], [0.5, 0.0, 0.0], atol=1e-15)

    def test_stub_pure_rotation_matches_matrix_product(self):
        from avagen.skeleton import rodrigues

        r = rodrigues(np.array([0.3, -0.5, 0.7]))
        mats = np.stack([np.eye(4), np.eye(4)])
        mats[0, :3, :3] = r
        fields = DeformFields(
            weight_fn=lambda x: np.tile([1.0, 0.0], (x.shape[0], 1)),
            warp_fn=lambda xh, beta: xh,
            occ_fn=None,
            n_b=2,
        )
        pts = np.random.default_rng(8).normal(size=(6, 3))
        out = deform_points(fields, pts, np.zeros(N_SIZE), mats)
        np.testing.assert_allclose(out, pts @ r.T, atol=1e-13)

    def test_var_path_matches_numpy(self, mini_model):
        rng = np.random.default_rng(9)
        bp = BodyParams(rng.uniform(-1, 1, N_SIZE), rng.uniform(-0.6, 0.6, (6, 3)))
        x = rng.uniform(-0.5, 0.5, (10, 3))
        z = rand_z(mini_model)
        a = forward_deform(mini_model, x, bp, z)
        b = forward_deform_var(mini_model, Var(x), bp, z).value
        np.testing.assert_allclose(a, b, atol=1e-12)


def warp_identity_adjusted(model, x):
    # at rest pose x' = x_hat exactly regardless of weights (blend of identities)
    return x


class TestCorrespondence:
    def test_identity_pose_recovers_point(self, fresh_model):
        xp = np.array([0.2, 0.1, 0.05])
        corrs = canonical_correspondence(fresh_model, xp, rest_bp(), rand_z(fresh_model))
        assert len(corrs) == 1
        c = corrs[0]
        assert c.valid and c.residual < skinning.CORR_TOL and c.iters <= 2
        np.testing.assert_allclose(c.x_hat_star, xp, atol=1e-8)

    def test_single_bone_rotation_closed_form(self):
        from avagen.skeleton import rodrigues

        r = rodrigues(np.array([0.0, 0.0, np.pi / 3]))
        mats = np.stack([np.eye(4)] * 2)
        mats[0, :3, :3] = r
        mats[1, :3, :3] = r  # both transforms equal -> rigid motion

        def deform_fn(xh):
            return xh @ r.T

        xp = np.array([[0.4, 0.2, -0.1]])
        roots, conv, resid, _ = correspondence_search(xp, mats, deform_fn, 2, tol=1e-9)
        assert conv.any()
        expect = r.T @ xp[0]
        for b in range(2):
            if conv[0, b]:
                np.testing.assert_allclose(roots[0, b], expect, atol=1e-7)

    def test_posed_surface_matches_grid_search_oracle(self):
        # two-bone arm posed 45 degrees; brute-force pre-image on a dense
        # canonical grid is the oracle
        sk = humanoid6()
        theta = np.zeros((6, 3))
        theta[2] = [0.0, 0.0, np.pi / 4]
        bp = BodyParams(np.zeros(N_SIZE), theta)
        bt = bone_transforms(sk, bp)

        from avagen.synthdata import generate_subject, weights_oracle

        subject = generate_subject(5, sk)

        def deform_fn(xh):
            w = weights_oracle(subject, xh)
            return lbs_blend(w, bt.mats, xh)

        x_hat_true = np.array([0.45, 0.22, 0.03])  # on the arm
        xp = deform_fn(x_hat_true[None])[0]
        roots, conv, resid, _ = correspondence_search(xp[None], bt.mats, deform_fn, 6, tol=1e-8)
        best = None
        for b in range(6):
            if conv[0, b] and (best is None or np.linalg.norm(roots[0, b] - x_hat_true) < best):
                best = np.linalg.norm(roots[0, b] - x_hat_true)
        assert best is not None
        # grid-search oracle around the region
        grid = np.stack(
            np.meshgrid(
                np.linspace(0.2, 0.7, 41), np.linspace(0.0, 0.4, 33), np.linspace(-0.1, 0.2, 25),
                indexing="ij",
            ),
            axis=-1,
        ).reshape(-1, 3)
        d = np.linalg.norm(deform_fn(grid) - xp, axis=1)
        oracle = grid[np.argmin(d)]
        # refine the oracle on two successively finer local grids
        for half in (0.02, 0.002):
            local = oracle + np.stack(
                np.meshgrid(*[np.linspace(-half, half, 21)] * 3, indexing="ij"), axis=-1
            ).reshape(-1, 3)
            d2 = np.linalg.norm(deform_fn(local) - xp, axis=1)
            oracle = local[np.argmin(d2)]
        found = roots[0][conv[0]]
        assert np.min(np.linalg.norm(found - oracle, axis=1)) < 1e-3

    def test_round_trip_random_poses(self, mini_model):
        rng = np.random.default_rng(11)
        z = rand_z(mini_model)
        ok = 0
        total = 0
        for _ in range(20):
            theta = rng.uniform(-np.pi / 3, np.pi / 3, (6, 3))
            bp = BodyParams(rng.uniform(-1, 1, N_SIZE), theta)
            x_hat = rng.uniform(-0.4, 0.4, (10, 3))
            xp = forward_deform(mini_model, x_hat, bp, z)
            roots, conv, _, _ = skinning.correspondence_batch(mini_model, xp, bp, z)
            for i in range(10):
                total += 1
                found = roots[i][conv[i]]
                if found.size and np.min(np.linalg.norm(found - x_hat[i], axis=1)) < 1e-4:
                    ok += 1
        assert ok / total > 0.99

    def test_all_diverged_empty_list(self, mini_model):
        # a point far outside any plausible deformation image
        corrs = canonical_correspondence(
            mini_model, np.array([500.0, 500.0, 500.0]), rest_bp(), rand_z(mini_model)
        )
        assert isinstance(corrs, list)


class TestPosedFields:
    def test_identity_pose_equals_canonical(self, fresh_model):
        z = rand_z(fresh_model)
        x = np.array([0.1, 0.0, 0.05])
        o_posed, f_posed = posed_occupancy(fresh_model, x, rest_bp(), z)
        o_can, f_can = canonical.occupancy(fresh_model, x, z)
        assert o_posed == pytest.approx(o_can, abs=1e-9)
        np.testing.assert_allclose(f_posed, f_can, atol=1e-9)

    def test_far_point_is_free_space(self, mini_model):
        o, f = posed_occupancy(mini_model, np.array([30.0, 0.0, 0.0]), rest_bp(), rand_z(mini_model))
        assert o == 0.0
        np.testing.assert_array_equal(f, 0.0)

    def test_oracle_stub_agreement(self):
        # pipeline posed occupancy with oracle fields vs direct posed oracle
        from avagen import synthdata

        sk = humanoid6()
        subject = synthdata.generate_subject(3, sk)
        rng = np.random.default_rng(12)
        theta = synthdata.random_pose(sk, rng, max_angle=0.7)
        bp = BodyParams(rng.uniform(-1, 1, N_SIZE), theta)
        bt = bone_transforms(sk, bp)
        fields = DeformFields(
            weight_fn=lambda x: synthdata.weights_oracle(subject, x),
            warp_fn=lambda xh, beta: synthdata.warp_oracle(subject, xh, beta),
            occ_fn=lambda x: (
                synthdata.occupancy_oracle(subject, warp_inverse_is_identity(subject, x), bp.beta) * 0
                + (synthdata.surface_margin(subject, x, np.zeros(N_SIZE)) <= 0).astype(float),
                np.zeros((np.atleast_2d(x).shape[0], 1)),
            ),
            n_b=6,
        )
        box = synthdata.posed_bbox(subject, bp)
        pts = rng.uniform(box[0], box[1], (2000, 3))
        out = posed_fields_batch(fields, pts, bp.beta, bt.mats, tol=1e-7, max_iter=40)
        direct = synthdata.posed_occupancy_oracle(subject, pts, bp)
        agree = np.mean((out["o"] > 0.5) == (direct > 0.5))
        assert agree >= 0.99


def warp_inverse_is_identity(subject, x):
    return x


class TestPosedNormal:
    def test_identity_pose_returns_canonical_normal(self, mini_model):
        z = rand_z(mini_model)
        zd = np.random.default_rng(13).normal(size=mini_model.arch.l_detail)
        x_star = np.array([0.1, 0.2, 0.0])
        _, f = canonical.occupancy(mini_model, x_star, z)
        n_can = canonical.normal(mini_model, x_star, zd, f)
        n_posed = posed_normal(mini_model, x_star, zd, f, rest_bp(), z)
        np.testing.assert_allclose(n_posed, n_can, atol=1e-12)

    def test_single_bone_rotation_rotates_normal(self, mini_model):
        # hard weights on one rotated bone: inverse-transpose of a rotation
        # is the rotation itself
        from avagen.skeleton import rodrigues

        z = rand_z(mini_model)
        zd = np.zeros(mini_model.arch.l_detail)
        x_star = np.array([0.05, 0.1, 0.0])
        _, f = canonical.occupancy(mini_model, x_star, z)
        n_can = canonical.normal(mini_model, x_star, zd, f)
        r = rodrigues(np.array([0.4, 0.2, -0.3]))
        w = np.zeros((1, 6))
        w[0, 2] = 1.0
        rots = np.tile(np.eye(3), (6, 1, 1))
        rots[2] = r
        blends = skinning.blend_rotation(w, rots)
        n_posed = skinning.apply_inverse_transpose(blends, n_can[None])[0]
        np.testing.assert_allclose(n_posed, r @ n_can, atol=1e-9)

    def test_output_unit_norm(self, mini_model):
        rng = np.random.default_rng(14)
        bp = BodyParams(rng.uniform(-1, 1, N_SIZE), rng.uniform(-0.5, 0.5, (6, 3)))
        z = rand_z(mini_model)
        zd = rng.normal(size=mini_model.arch.l_detail)
        x_star = rng.uniform(-0.3, 0.3, (5, 3))
        _, f = canonical.occupancy(mini_model, x_star, z)
        n = posed_normal(mini_model, x_star, zd, f, bp, z)
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)

    def test_singular_blend_raises(self):
        from avagen.errors import SingularBlend

        blends = np.zeros((1, 3, 3))
        with pytest.raises(SingularBlend):
            skinning.apply_inverse_transpose(blends, np.array([[0.0, 0.0, 1.0]]))


class TestImplicitGradients:
    def test_posed_occupancy_grad_matches_fd(self, mini_model):
        """dL/dparams through the root via IFT vs central differences."""
        rng = np.random.default_rng(15)
        # give the occupancy head live weights so features matter
        last = len(mini_model.specs["occ"].layer_dims()) - 1
        w = mini_model.geo.view(f"occ.w{last}")
        w[:] = rng.normal(0, 0.3, w.shape)
        # give warp/skin mild nonzero heads so the root actually moves
        for net in ("warp", "skin"):
            lastn = len(mini_model.specs[net].layer_dims()) - 1
            wn = mini_model.geo.view(f"{net}.w{lastn}")
            wn[:] = rng.normal(0, 0.1, wn.shape)
        mini_model.bump_version()

        theta = rng.uniform(-0.5, 0.5, (6, 3))
        bp = BodyParams(rng.uniform(-1, 1, N_SIZE), theta)
        z = rand_z(mini_model, 16)
        xp = forward_deform(mini_model, rng.uniform(-0.3, 0.3, (3, 3)), bp, z)
        bt = bone_transforms(mini_model.skeleton, bp)

        def loss(pv):
            mini_model.bump_version()
            pv.zero_grad()
            out = skinning.posed_occupancy_batch(mini_model, xp, bp, z, bt=bt)
            roots = out["root"]
            z_var = Var(z)
            o, _, root_leaf = skinning.occupancy_at_roots_var(mini_model, roots, bp, z_var)
            total = tape.vsum(o * Var(out["has_root"].astype(float)))
            backward(total)
            skinning.ift_backprop(mini_model, roots, root_leaf.grad, bp, z_var, bt=bt)
            return float(total.value), pv.grad.copy()

        idx = rng.choice(mini_model.geo.size, size=120, replace=False)
        err = grad_check(loss, mini_model.geo, eps=1e-6, indices=idx)
        assert err < 1e-3
