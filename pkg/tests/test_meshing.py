"""Adaptive iso-surface extraction, topology checks, reposing, mesh I/O."""

import numpy as np
import pytest

from avagen import meshing
from avagen.meshing import (
    Mesh,
    adaptive_grid,
    edge_multiplicities,
    euler_characteristics,
    extract_mesh,
    is_watertight,
    marching_cubes_mesh,
    read_obj,
    read_weights,
    repose_mesh,
    write_obj,
    write_weights,
)
from avagen.skeleton import BodyParams, N_SIZE, humanoid6
from avagen.model import new_model

BOX = (np.array([-1.3, -1.3, -1.3]), np.array([1.3, 1.3, 1.3]))


def sphere_field(pts, radius=1.0, sharp=8.0):
    r = np.linalg.norm(np.atleast_2d(pts), axis=1)
    return 1.0 / (1.0 + np.exp(sharp * (r - radius) / radius))


class TestAdaptiveGrid:
    def test_matches_dense_on_sphere(self):
        vals_a, lo, cell = adaptive_grid(sphere_field, BOX, base_res=16, refine_levels=2)
        res = 64
        axes = [np.linspace(BOX[0][d], BOX[1][d], res + 1) for d in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        dense = sphere_field(grid).reshape(res + 1, res + 1, res + 1)
        mesh_a, _ = marching_cubes_mesh(vals_a, lo, cell)
        mesh_d, _ = marching_cubes_mesh(dense, lo, cell)
        assert mesh_a.vertices.shape == mesh_d.vertices.shape
        np.testing.assert_allclose(
            np.sort(mesh_a.vertices.reshape(-1)), np.sort(mesh_d.vertices.reshape(-1)), atol=1e-9
        )

    def test_evaluates_fewer_points_than_dense(self):
        calls = {"n": 0}

        def counting(pts):
            calls["n"] += len(np.atleast_2d(pts))
            return sphere_field(pts)

        adaptive_grid(counting, BOX, base_res=16, refine_levels=2)
        dense_nodes = 65 ** 3
        assert calls["n"] < 0.5 * dense_nodes


class TestSphereExtraction:
    def setup_method(self):
        self.vals, self.lo, self.cell = adaptive_grid(sphere_field, BOX, 16, 2)
        self.mesh, _ = marching_cubes_mesh(self.vals, self.lo, self.cell)

    def test_vertices_near_unit_radius(self):
        r = np.linalg.norm(self.mesh.vertices, axis=1)
        w = np.max(self.cell)
        assert np.all(np.abs(r - 1.0) < 2 * w)

    def test_euler_characteristic_is_two(self):
        chars = euler_characteristics(self.mesh)
        assert list(chars.values()) == [2]

    def test_watertight(self):
        assert is_watertight(self.mesh)

    def test_empty_when_below_level(self):
        mesh, _ = marching_cubes_mesh(self.vals * 0.0, self.lo, self.cell)
        assert mesh.is_empty

    def test_oriented_with_field_gradient(self):
        mesh = meshing._orient_outward(self.mesh.copy(), sphere_field)
        tri = mesh.triangles
        a, b, c = (mesh.vertices[tri[:, k]] for k in range(3))
        tn = np.cross(b - a, c - a)
        tn /= np.linalg.norm(tn, axis=1, keepdims=True)
        centers = (a + b + c) / 3
        outward = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        assert np.mean(np.sum(tn * outward, axis=1) > 0) > 0.99


class TestExtractModel:
    def test_empty_surface_gives_empty_mesh(self, fresh_model):
        # occupancy is exactly 0.5 everywhere in the box: force below tau
        last = len(fresh_model.specs["occ"].layer_dims()) - 1
        fresh_model.geo.view(f"occ.b{last}")[:] = -4.0
        fresh_model.bump_version()
        mesh = extract_mesh(fresh_model, np.zeros(fresh_model.arch.l_shape), np.zeros(N_SIZE),
                            base_res=8, refine_levels=1)
        assert mesh.is_empty

    def test_rejects_tiny_base_res(self, fresh_model):
        with pytest.raises(ValueError):
            extract_mesh(fresh_model, np.zeros(fresh_model.arch.l_shape), np.zeros(N_SIZE),
                         base_res=4)

    def test_vertices_on_level_set_and_attributes(self, mini_model):
        # bias the occupancy into a nontrivial blob: center the head so the
        # tau level set provably lies inside the volume box
        from avagen import canonical, skinning

        rng = np.random.default_rng(0)
        last = len(mini_model.specs["occ"].layer_dims()) - 1
        mini_model.geo.view(f"occ.w{last}")[:] = rng.normal(
            0, 1.0, mini_model.geo.view(f"occ.w{last}").shape
        )
        mini_model.bump_version()
        z = rng.normal(size=mini_model.arch.l_shape)
        beta = np.zeros(N_SIZE)
        probe = rng.uniform(mini_model.bbox[0], mini_model.bbox[1], (2000, 3))
        o, _ = canonical.occupancy(mini_model, probe, z)
        logits = np.log(o / (1 - o))
        mini_model.geo.view(f"occ.b{last}")[:] = -np.median(logits)
        mini_model.bump_version()
        mesh = extract_mesh(mini_model, z, beta, base_res=12, refine_levels=1)
        assert not mesh.is_empty

        x_star = skinning.warp(mini_model, mesh.vertices, beta)
        o, _ = canonical.occupancy(mini_model, x_star, z)
        # this synthetic blob fills half the box, so the level set is clipped
        # at the box faces; the contract applies to interior vertices
        interior = np.all(
            (x_star > mini_model.bbox[0] + 1e-9) & (x_star < mini_model.bbox[1] - 1e-9), axis=1
        )
        assert interior.sum() > 100
        assert np.all(np.abs(o[interior] - 0.5) < 0.05)
        assert mesh.weights.shape == (len(mesh.vertices), 6)
        np.testing.assert_allclose(mesh.weights.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-9)


class TestRepose:
    def make_mesh(self):
        verts = np.array([[0.1, 0.0, 0.0], [0.2, 0.1, 0.0], [0.15, 0.0, 0.1], [0.3, -0.1, 0.05]])
        tris = np.array([[0, 1, 2], [1, 3, 2]])
        normals = np.tile([0.0, 0.0, 1.0], (4, 1))
        w = np.zeros((4, 6))
        w[:, 2] = 1.0  # hard weights on one bone
        return Mesh(verts, tris, normals, w)

    def test_rest_pose_bit_identical(self, mini_model):
        mesh = self.make_mesh()
        out = repose_mesh(mini_model, mesh, BodyParams.rest(6))
        np.testing.assert_array_equal(out.vertices, mesh.vertices)
        np.testing.assert_array_equal(out.normals, mesh.normals)
        np.testing.assert_array_equal(out.triangles, mesh.triangles)

    def test_connectivity_preserved_any_pose(self, mini_model):
        rng = np.random.default_rng(1)
        mesh = self.make_mesh()
        for _ in range(5):
            bp = BodyParams(rng.uniform(-1, 1, N_SIZE), rng.uniform(-1, 1, (6, 3)))
            out = repose_mesh(mini_model, mesh, bp)
            assert out.vertices.shape == mesh.vertices.shape
            np.testing.assert_array_equal(out.triangles, mesh.triangles)
            assert np.all(np.isfinite(out.vertices))

    def test_single_bone_invertibility(self, mini_model):
        # hard single-bone weights: posing by theta then -theta returns the
        # original vertices
        mesh = self.make_mesh()
        theta = np.zeros((6, 3))
        theta[2] = [0.3, -0.4, 0.6]
        fwd = repose_mesh(mini_model, mesh, BodyParams(np.zeros(N_SIZE), theta))
        back = repose_mesh(mini_model, fwd, BodyParams(np.zeros(N_SIZE), -theta))
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-9)

    def test_requires_weights(self, mini_model):
        mesh = self.make_mesh()
        mesh.weights = None
        with pytest.raises(ValueError):
            repose_mesh(mini_model, mesh, BodyParams.rest(6))


class TestMeshIO:
    def test_obj_round_trip(self, tmp_path):
        mesh = Mesh(
            vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
            triangles=np.array([[0, 1, 2]]),
            normals=np.tile([0.0, 0, 1], (3, 1)),
        )
        p = tmp_path / "m.obj"
        write_obj(p, mesh)
        back = read_obj(p)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-9)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        np.testing.assert_allclose(back.normals, mesh.normals, atol=1e-9)

    def test_weights_round_trip(self, tmp_path):
        mesh = Mesh(
            vertices=np.zeros((3, 3)),
            triangles=np.array([[0, 1, 2]]),
            normals=np.tile([0.0, 0, 1], (3, 1)),
            weights=np.random.default_rng(0).dirichlet(np.ones(6), 3),
        )
        p = tmp_path / "m.gdnw"
        write_weights(p, mesh)
        w = read_weights(p)
        np.testing.assert_array_equal(w, mesh.weights)

    def test_weights_bad_magic_and_truncation(self, tmp_path):
        from avagen.errors import FileFormatError, FileLengthError

        p = tmp_path / "bad.gdnw"
        p.write_bytes(b"XXXX" + b"\0" * 12)
        with pytest.raises(FileFormatError):
            read_weights(p)
        mesh = Mesh(
            vertices=np.zeros((2, 3)),
            triangles=np.zeros((0, 3), dtype=np.int64),
            normals=np.tile([0.0, 0, 1], (2, 1)),
            weights=np.full((2, 6), 1 / 6),
        )
        q = tmp_path / "w.gdnw"
        write_weights(q, mesh)
        (tmp_path / "t.gdnw").write_bytes(q.read_bytes()[:-8])
        with pytest.raises(FileLengthError):
            read_weights(tmp_path / "t.gdnw")
