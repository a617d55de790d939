"""Perceptron forward contracts, Broyden/secant solvers, grad_check."""

import numpy as np
import pytest

from avagen.diffnum import (
    MlpSpec,
    ParamVector,
    backward,
    broyden_solve,
    broyden_solve_batch,
    grad_check,
    init_mlp,
    mlp_forward,
    mlp_forward_var,
    secant_find_crossing,
)
from avagen.errors import DimensionMismatch, NoCrossing


def build_net(spec, seed=0, **init_kw):
    pv = ParamVector.build(spec.segments())
    init_mlp(spec, pv, np.random.default_rng(seed), **init_kw)
    return pv


class TestMlpForward:
    def test_zero_final_layer_sigmoid_gives_half(self):
        spec = MlpSpec("net", 3, 0, hidden=(8,), output_dim=1, head="sigmoid")
        pv = build_net(spec, final_zero=True)
        x = np.random.default_rng(1).normal(size=(10, 3))
        out = mlp_forward(spec, pv, x)
        np.testing.assert_allclose(out, 0.5, atol=1e-15)

    def test_softmax_head_equal_logits_uniform(self):
        spec = MlpSpec("net", 2, 0, hidden=(4,), output_dim=5, head="softmax")
        pv = build_net(spec, final_zero=True)
        out = mlp_forward(spec, pv, np.array([[0.3, -0.7]]))
        np.testing.assert_allclose(out, 0.2, atol=1e-12)

    def test_hand_set_single_hidden_layer(self):
        # one hidden unit, tanh activation, hand arithmetic oracle
        spec = MlpSpec("net", 3, 0, hidden=(2,), output_dim=1, activation="tanh", head="none")
        pv = ParamVector.build(spec.segments())
        pv.view("net.w0")[:] = np.array([[1.0, 0.5], [0.0, -1.0], [0.0, 2.0]])
        pv.view("net.b0")[:] = np.array([0.25, 0.0])
        pv.view("net.w1")[:] = np.array([[2.0], [-3.0]])
        pv.view("net.b1")[:] = np.array([0.1])
        x = np.array([[1.0, 0.0, 0.0]])
        h = np.tanh(np.array([1.0 + 0.25, 0.5]))
        expected = 2.0 * h[0] - 3.0 * h[1] + 0.1
        out = mlp_forward(spec, pv, x)
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-14)

    def test_condition_concatenated(self):
        spec = MlpSpec("net", 3, 4, hidden=(6,), output_dim=2)
        pv = build_net(spec)
        x = np.random.default_rng(2).normal(size=(5, 3))
        c = np.random.default_rng(3).normal(size=4)
        out = mlp_forward(spec, pv, x, c)
        assert out.shape == (5, 2)
        out2 = mlp_forward(spec, pv, x, np.broadcast_to(c, (5, 4)).copy())
        np.testing.assert_array_equal(out, out2)

    def test_dimension_mismatch_names_segment(self):
        spec = MlpSpec("occ", 3, 0, hidden=(4,), output_dim=1)
        pv = build_net(spec)
        with pytest.raises(DimensionMismatch) as ei:
            mlp_forward(spec, pv, np.zeros((2, 5)))
        assert "occ" in str(ei.value)

    def test_var_path_matches_numpy_path(self):
        spec = MlpSpec("net", 3, 2, hidden=(7, 5), output_dim=4, head="softmax")
        pv = build_net(spec, seed=9)
        x = np.random.default_rng(4).normal(size=(6, 3))
        c = np.random.default_rng(5).normal(size=(6, 2))
        np.testing.assert_array_equal(
            mlp_forward_var(spec, pv, x, c).value, mlp_forward(spec, pv, x, c)
        )

    def test_unitnorm_head_unit_length(self):
        spec = MlpSpec("net", 3, 0, hidden=(5,), output_dim=3, head="unitnorm")
        pv = build_net(spec, seed=11)
        out = mlp_forward(spec, pv, np.random.default_rng(6).normal(size=(8, 3)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)


class TestBroyden:
    def test_affine_identity_jacobian_two_iters(self):
        c = np.array([0.3, -1.2, 0.8])
        res = broyden_solve(lambda x: x - c, np.zeros(3), tol=1e-10)
        assert res.converged and res.iters <= 2
        np.testing.assert_allclose(res.root, c, atol=1e-10)

    def test_general_affine_matches_linear_solve(self):
        rng = np.random.default_rng(0)
        a = np.eye(3) + 0.25 * rng.normal(size=(3, 3))
        b = rng.normal(size=3)
        res = broyden_solve(lambda x: a @ x - b, np.zeros(3), tol=1e-9, max_iter=60)
        assert res.converged
        np.testing.assert_allclose(res.root, np.linalg.solve(a, b), atol=1e-7)

    def test_affine_finite_termination(self):
        # identity-initialized good Broyden terminates on affine systems in
        # at most 2*dim iterations (Gay 1979); the bound is tight, so 6 is
        # the guarantee for 3-vectors
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
            b = rng.normal(size=3)
            res = broyden_solve(lambda x: a @ x - b, np.zeros(3), tol=1e-5, max_iter=20)
            assert res.converged and res.iters <= 6

    def test_mildly_nonlinear_matches_bisection_oracle(self):
        c = np.array([0.4, -0.9, 1.3])

        def f(x):
            return x + 0.1 * np.sin(x) - c

        res = broyden_solve(f, np.zeros(3), tol=1e-9, max_iter=60)
        assert res.converged
        # componentwise bisection oracle on a wide bracket
        for k in range(3):
            lo, hi = -4.0, 4.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if (mid + 0.1 * np.sin(mid) - c[k]) > 0:
                    hi = mid
                else:
                    lo = mid
            assert abs(res.root[k] - 0.5 * (lo + hi)) < 1e-8

    def test_nonfinite_reports_not_converged(self):
        res = broyden_solve(lambda x: np.array([np.nan, 0, 0]), np.zeros(3))
        assert not res.converged and "non-finite" in res.status

    def test_divergence_guard(self):
        res = broyden_solve(lambda x: np.array([1e9, 0, 0]) * 0 + x * 0 + 1e9, np.zeros(3), max_iter=10)
        assert not res.converged

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        a = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
        targets = rng.normal(size=(50, 3))

        def f(x, rows):
            return x @ a.T + 0.05 * np.sin(x) - targets[rows]

        roots, conv, res, iters = broyden_solve_batch(f, np.zeros((50, 3)), tol=1e-10, max_iter=60)
        assert conv.all()
        assert np.all(res <= 1e-10)
        for i in range(50):
            single = broyden_solve(
                lambda x: a @ x + 0.05 * np.sin(x) - targets[i], np.zeros(3), tol=1e-10, max_iter=60
            )
            np.testing.assert_allclose(roots[i], single.root, atol=1e-7)

    def test_batch_divergent_rows_flagged(self):
        # row 0 is far out of reach; rows 1.. are trivial
        def f(x, rows):
            out = x.copy()
            out[rows == 0] = x[rows == 0] * 0 + 1e6
            return out

        roots, conv, res, _ = broyden_solve_batch(f, np.zeros((4, 3)), tol=1e-8, max_iter=20)
        assert not conv[0]
        assert conv[1:].all()


class TestSecant:
    def test_linear_exact(self):
        assert secant_find_crossing(lambda t: t, 0.0, 1.0, tau=0.5) == pytest.approx(0.5, abs=1e-12)

    def test_hand_arithmetic(self):
        t = secant_find_crossing(lambda t: 2 * t - 0.2, 0.0, 1.0, tau=0.5)
        assert t == pytest.approx(0.35, abs=1e-12)

    def test_sphere_ray(self):
        # occupancy of the unit sphere along origin (0,0,-2), direction +z
        def g(t):
            p = np.array([0.0, 0.0, -2.0 + t])
            return 1.0 if np.linalg.norm(p) <= 1.0 else 0.0

        # smooth variant so the secant has a slope to work with
        def g_smooth(t):
            p = np.array([0.0, 0.0, -2.0 + t])
            return 1.0 / (1.0 + np.exp(200.0 * (np.linalg.norm(p) - 1.0)))

        t = secant_find_crossing(g_smooth, 0.5, 1.5, tau=0.5, iters=60)
        assert t == pytest.approx(1.0, abs=1e-5)

    def test_no_crossing_raises(self):
        with pytest.raises(NoCrossing):
            secant_find_crossing(lambda t: t, 0.6, 1.0, tau=0.5)

    def test_result_stays_in_bracket(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = sorted(rng.uniform(-2, 2, size=2))
            if a == b:
                continue
            bias = rng.normal()

            def g(t):
                return np.tanh(3 * t) + 0.2 * np.sin(5 * t) + bias

            ga, gb = g(a) - 0.5, g(b) - 0.5
            if ga * gb > 0:
                continue
            t = secant_find_crossing(g, a, b, tau=0.5, iters=12)
            assert a <= t <= b


class TestGradCheck:
    def test_quadratic(self):
        pv = ParamVector.build([("p", (6,))])
        pv.values[:] = np.random.default_rng(0).normal(size=6)

        def f(p):
            return float(p.values @ p.values), 2.0 * p.values

        assert grad_check(f, pv, eps=1e-5) < 1e-6

    def test_constant(self):
        pv = ParamVector.build([("p", (4,))])

        def f(p):
            return 1.0, np.zeros(4)

        assert grad_check(f, pv) == 0.0

    def test_mlp_output_component(self):
        spec = MlpSpec("net", 2, 0, hidden=(5,), output_dim=3, activation="tanh")
        pv = build_net(spec, seed=3)
        x = np.array([[0.3, -0.8]])

        def f(p):
            p.zero_grad()
            out = mlp_forward_var(spec, p, x)
            target = out.value[0, 1]
            backward(tape_component(out))
            return float(target), p.grad.copy()

        def tape_component(out):
            from avagen.diffnum import tape

            return tape.vsum(tape.take(out, np.array([1])))

        assert grad_check(f, pv, eps=1e-4) < 1e-4
