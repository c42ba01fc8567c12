import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from oracles import central_diff, rel_err, rotation_loss_loops
from rotomtl.linalg import SkewParam
from rotomtl.rotation import (
    RotationSet,
    TargetVector,
    apply,
    make_target,
    pull_back,
    rotation_loss,
    rotation_loss_grad,
    rotation_matrix_grad,
)
from rotomtl.tasks import avocado


def random_set(rng, k, d, m, scale=1.0):
    rs = RotationSet(k, d, m)
    for t in range(k):
        rs.set_param(t, scale * rng.standard_normal(SkewParam.n_params(m)))
    return rs


def quarter_turn(d=2):
    rs = RotationSet(1, d, 2)
    rs.set_param(0, [math.pi / 2])
    return rs


class TestRotationSet:
    def test_rejects_small_subspace(self):
        with pytest.raises(ValueError):
            RotationSet(2, 4, 1)
        with pytest.raises(ValueError):
            RotationSet(2, 4, 5)

    def test_rejects_no_tasks(self):
        with pytest.raises(ValueError):
            RotationSet(0, 2, 2)

    def test_cache_invalidation(self):
        rs = RotationSet(2, 3, 3)
        assert np.array_equal(rs.matrix(0), np.eye(3))
        assert rs.is_clean(0)
        rs.set_param(0, [0.1, 0.2, 0.3])
        assert not rs.is_clean(0)
        assert not np.allclose(rs.matrix(0), np.eye(3))
        assert np.array_equal(rs.matrix(1), np.eye(3))

    @pytest.mark.parametrize("seed", range(20))
    def test_orthonormal(self, seed):
        rng = np.random.default_rng(seed)
        rs = random_set(rng, 3, 6, 5, scale=2.0)
        for k in range(3):
            r = rs.matrix(k)
            assert np.linalg.norm(r.T @ r - np.eye(5)) < 1e-10
            assert abs(np.linalg.det(r) - 1.0) < 1e-8


class TestApply:
    def test_identity(self):
        z = np.random.default_rng(0).standard_normal((4, 3))
        assert np.array_equal(apply(RotationSet(2, 3, 3), z, 1), z)

    def test_quarter_turn(self):
        r = apply(quarter_turn(3), np.array([[1.0, 0.0, 5.0]]), 0)
        assert np.allclose(r, [[0.0, 1.0, 5.0]], atol=1e-15)

    def test_task_out_of_range(self):
        with pytest.raises(IndexError):
            apply(RotationSet(2, 2, 2), np.ones((1, 2)), 2)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            apply(RotationSet(1, 3, 2), np.ones((1, 2)), 0)

    @given(st.integers(0, 10_000), st.integers(2, 7), st.integers(0, 3))
    def test_norms_and_trailing(self, seed, m, extra):
        rng = np.random.default_rng(seed)
        d = m + extra
        rs = random_set(rng, 2, d, m, scale=3.0)
        z = rng.standard_normal((5, d)) * 10.0 ** rng.uniform(-3, 3)
        r = apply(rs, z, 1)
        assert np.allclose(np.linalg.norm(r, axis=1), np.linalg.norm(z, axis=1), rtol=1e-10, atol=0)
        assert np.array_equal(r[:, m:], z[:, m:])


class TestPullBack:
    def test_identity(self):
        g = np.random.default_rng(0).standard_normal((3, 2))
        assert np.array_equal(pull_back(RotationSet(1, 2, 2), 0, g), g)

    def test_quarter_turn(self):
        assert np.allclose(pull_back(quarter_turn(), 0, np.array([[0.0, 1.0]])), [[1.0, 0.0]], atol=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            pull_back(RotationSet(1, 4, 3), 0, np.ones((2, 2)))

    @pytest.mark.parametrize("seed", range(20))
    def test_inverts_rotation(self, seed):
        rng = np.random.default_rng(seed)
        rs = random_set(rng, 1, 5, 5, scale=2.0)
        g = rng.standard_normal((4, 5))
        assert np.max(np.abs(pull_back(rs, 0, g @ rs.matrix(0).T) - g)) < 1e-10

    def test_full_width_passes_trailing(self):
        rng = np.random.default_rng(1)
        rs = random_set(rng, 1, 5, 3)
        g = rng.standard_normal((2, 5))
        out = pull_back(rs, 0, g)
        assert np.array_equal(out[:, 3:], g[:, 3:])
        assert np.array_equal(out[:, :3], pull_back(rs, 0, g[:, :3]))


class TestRotationLoss:
    def test_aligned(self):
        v = TargetVector(np.array([[1.0, 0.0]]))
        assert rotation_loss(RotationSet(1, 2, 2), 0, np.array([[1.0, 0.0]]), v) == -1.0

    def test_zero_target(self):
        rs = random_set(np.random.default_rng(0), 1, 3, 3)
        assert rotation_loss(rs, 0, np.ones((2, 3)), TargetVector(np.zeros((2, 3)))) == 0.0

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            rotation_loss(RotationSet(1, 2, 2), 0, np.ones((2, 2)), TargetVector(np.ones((3, 2))))

    @pytest.mark.parametrize("seed", range(30))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 7))
        rs = random_set(rng, 1, m, m)
        g, v = rng.standard_normal((6, m)), rng.standard_normal((6, m))
        expected = rotation_loss_loops(rs.matrix(0), g, v)
        assert abs(rotation_loss(rs, 0, g, TargetVector(v)) - expected) < 1e-12 * max(1.0, abs(expected))


class TestRotationLossGrad:
    def test_zero_target(self):
        rs = random_set(np.random.default_rng(0), 1, 3, 3)
        g = rotation_loss_grad(rs, 0, np.ones((2, 3)), TargetVector(np.zeros((2, 3))))
        assert not np.any(g)

    def test_zero_gradient_input(self):
        rs = random_set(np.random.default_rng(1), 1, 3, 3)
        g = rotation_loss_grad(rs, 0, np.zeros((2, 3)), TargetVector(np.ones((2, 3))))
        assert not np.any(g)

    def test_matrix_gradient_formula(self):
        g = np.array([[1.0, 2.0], [0.0, -1.0]])
        v = np.array([[3.0, 0.0], [1.0, 1.0]])
        expected = -(np.outer(g[0], v[0]) + np.outer(g[1], v[1]))
        assert np.array_equal(rotation_matrix_grad(RotationSet(1, 2, 2), g, TargetVector(v)), expected)

    @pytest.mark.parametrize("seed", range(25))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(1000 + seed)
        m = 4
        rs = random_set(rng, 1, m, m)
        g, v = rng.standard_normal((5, m)), rng.standard_normal((5, m))
        target = TargetVector(v)
        analytic = rotation_loss_grad(rs, 0, g, target)
        base = rs.param_vector(0).copy()

        def f(p):
            probe = RotationSet(1, m, m)
            probe.set_param(0, p)
            return rotation_loss(probe, 0, g, target)

        assert rel_err(analytic, central_diff(f, base), floor=1e-6) < 1e-5

    @pytest.mark.parametrize("seed", range(100))
    def test_small_step_never_increases(self, seed):
        rng = np.random.default_rng(5000 + seed)
        m = int(rng.integers(2, 7))
        rs = random_set(rng, 1, m, m, scale=1.5)
        g, v = rng.standard_normal((4, m)), TargetVector(rng.standard_normal((4, m)))
        step = float(rng.uniform(1e-5, 1e-3))
        before = rotation_loss(rs, 0, g, v)
        grad = rotation_loss_grad(rs, 0, g, v)
        rs.set_param(0, rs.param_vector(0) - step * grad)
        assert rotation_loss(rs, 0, g, v) <= before + 1e-9


class TestMakeTarget:
    def test_two_axes(self):
        v = make_target([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
        assert np.array_equal(v.rows, [[0.5, 0.5]])

    def test_identical(self):
        u = np.random.default_rng(0).standard_normal((3, 4))
        assert np.allclose(make_target([u, u, u]).rows, u, atol=1e-15)

    def test_mean_oracle(self):
        rng = np.random.default_rng(1)
        us = [rng.standard_normal((5, 3)) for _ in range(3)]
        assert np.max(np.abs(make_target(us).rows - (us[0] + us[1] + us[2]) / 3)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            make_target([np.ones((2, 2)), np.ones((3, 2))])


@pytest.mark.parametrize("theta", [0.3, 1.2, -2.5])
def test_rotated_identity_head_keeps_optimum(theta):
    rs = RotationSet(1, 2, 2)
    rs.set_param(0, [theta])
    r = rs.matrix(0)
    for shift in (0.0, 1.0):
        plain = minimize(lambda z: float(avocado(z, shift)), np.array([0.7, -0.4]), tol=1e-14).fun
        rotated = minimize(lambda z: float(avocado(r @ z, shift)), np.array([0.7, -0.4]), tol=1e-14).fun
        assert abs(plain - rotated) < 1e-6
