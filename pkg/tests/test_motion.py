import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_scene
from gs4d.errors import DataError, NumericalError
from gs4d.motion import (backprop_displacement, displacement,
                         displacement_jacobian, flow_field, motion_coefficient,
                         split_static_dynamic, warp_gaussians)
from oracles import taylor_displacement_terms


class TestMotionCoefficient:
    def test_normalized_direction(self):
        np.testing.assert_allclose(motion_coefficient(10.0, np.array([3.0, 4, 0])),
                                   [6, 8, 0])

    def test_zero_speed(self):
        np.testing.assert_array_equal(motion_coefficient(0.0, np.ones(3)), 0.0)

    def test_degenerate_direction_clamped(self):
        np.testing.assert_array_equal(
            motion_coefficient(5.0, np.array([1e-12, 0, 0])), 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            motion_coefficient(np.nan, np.ones(3))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-100, 100), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    def test_norm_equals_speed(self, s, v):
        v = np.array(v)
        m = motion_coefficient(s, v)
        if np.linalg.norm(v) >= 1e-8:
            assert np.linalg.norm(m) == pytest.approx(abs(s), rel=1e-9, abs=1e-12)
        else:
            assert np.all(m == 0)


class TestDisplacement:
    def test_term_by_term(self):
        m = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 6.0]])
        # 1/1!, 2/2!, 6/3! at dt = 1
        np.testing.assert_allclose(displacement(m, 1.0), [1, 1, 1])

    def test_zero_offset_exact(self, rng):
        m = rng.normal(size=(4, 3))
        assert np.all(displacement(m, 0.0) == 0.0)

    def test_linear_term(self):
        m = np.zeros((3, 3))
        m[0] = [2, 0, 0]
        np.testing.assert_allclose(displacement(m, 3.0), [6, 0, 0])

    def test_negative_offset(self):
        m = np.zeros((1, 3))
        m[0] = [1, 0, 0]
        np.testing.assert_allclose(displacement(m, -2.0), [-2, 0, 0])

    def test_matches_oracle_randomized(self, rng):
        for _ in range(200):
            L = int(rng.integers(1, 5))
            m = rng.normal(size=(L, 3))
            dt = rng.uniform(-10, 10)
            np.testing.assert_allclose(displacement(m, dt),
                                       taylor_displacement_terms(m, dt),
                                       rtol=0, atol=1e-12)

    def test_order0_is_constant_velocity(self, rng):
        m = np.zeros((1, 3))
        m[0] = rng.normal(size=3)
        for dt in (-3.0, 0.5, 7.0):
            np.testing.assert_allclose(displacement(m, dt), m[0] * dt, rtol=1e-15)


class TestWarp:
    def test_static_scene_identity(self, rng):
        g = random_scene(rng, n=10)
        g.speeds[:] = 0.0
        w = warp_gaussians(g, 10.0)
        np.testing.assert_array_equal(w.mu, g.mu)
        np.testing.assert_array_equal(w.c, g.c)

    def test_single_shift(self, rng):
        g = random_scene(rng, n=1)
        g.speeds[:] = 0.0
        g.speeds[0, 0] = 1.0
        g.dirs[0, 0] = [0, 1, 0]
        w = warp_gaussians(g, 2.0)
        np.testing.assert_allclose(w.mu[0] - g.mu[0], [0, 2, 0])
        np.testing.assert_array_equal(w.c, g.c)

    def test_non_position_attributes_bitwise(self, rng):
        g = random_scene(rng, n=15, with_motion=True)
        w = warp_gaussians(g, 3.5)
        for field in ("q", "s", "alpha", "c", "feature", "speeds", "dirs"):
            assert np.array_equal(getattr(w, field), getattr(g, field))

    def test_first_order_roundtrip(self, rng):
        g = random_scene(rng, n=8)
        g.speeds[:] = 0.0
        g.speeds[:, 0] = rng.normal(size=8)
        g.dirs[:, 0] = rng.normal(size=(8, 3))
        back = warp_gaussians(warp_gaussians(g, 4.0), -4.0)
        np.testing.assert_allclose(back.mu, g.mu, atol=1e-12)


class TestJacobian:
    def test_zero_offset(self, rng):
        ds, dv = displacement_jacobian(rng.normal(size=3), rng.normal(size=(3, 3)), 0.0)
        assert np.all(ds == 0) and np.all(dv == 0)

    def test_unit_direction_linear_term(self):
        ds, _ = displacement_jacobian(np.array([1.0]), np.array([[1.0, 0, 0]]), 1.0)
        np.testing.assert_allclose(ds[0], [1, 0, 0])

    def test_degenerate_direction_zero(self):
        ds, dv = displacement_jacobian(np.array([2.0]), np.array([[0.0, 0, 0]]), 1.0)
        assert np.all(ds == 0) and np.all(dv == 0)

    def test_finite_difference_1000_samples(self, rng):
        eps = 1e-5
        worst = 0.0
        for _ in range(1000):
            L = int(rng.integers(1, 4))
            speeds = rng.normal(0, 2, L)
            dirs = rng.normal(size=(L, 3))
            # keep directions away from the clamp region
            dirs += np.sign(dirs) * 0.1
            dt = rng.uniform(-3, 3)
            ds, dv = displacement_jacobian(speeds, dirs, dt)
            m = motion_coefficient(speeds, dirs)
            for l in range(L):
                sp = speeds.copy()
                sp[l] += eps
                fp = displacement(motion_coefficient(sp, dirs), dt)
                sp[l] -= 2 * eps
                fm = displacement(motion_coefficient(sp, dirs), dt)
                fd = (fp - fm) / (2 * eps)
                denom = max(1e-3, np.linalg.norm(fd))
                worst = max(worst, np.linalg.norm(fd - ds[l]) / denom)
                for k in range(3):
                    dd = dirs.copy()
                    dd[l, k] += eps
                    fp = displacement(motion_coefficient(speeds, dd), dt)
                    dd[l, k] -= 2 * eps
                    fm = displacement(motion_coefficient(speeds, dd), dt)
                    fd = (fp - fm) / (2 * eps)
                    denom = max(1e-3, np.linalg.norm(fd))
                    worst = max(worst, np.linalg.norm(fd - dv[l, :, k]) / denom)
        assert worst < 1e-6

    def test_backprop_matches_jacobian(self, rng):
        speeds = rng.normal(size=(5, 3))
        dirs = rng.normal(size=(5, 3, 3))
        d_gamma = rng.normal(size=(5, 3))
        gs, gd = backprop_displacement(speeds, dirs, 2.0, d_gamma)
        ds, dv = displacement_jacobian(speeds, dirs, 2.0)
        np.testing.assert_allclose(gs, np.einsum("nlk,nk->nl", ds, d_gamma))
        np.testing.assert_allclose(gd, np.einsum("nlkj,nk->nlj", dv, d_gamma))


class TestSplit:
    def test_zero_motion_static(self, rng):
        g = random_scene(rng, n=6)
        g.speeds[:] = 0.0
        st_set, dyn = split_static_dynamic(g, 5.0, 0.001)
        assert len(st_set) == 6 and len(dyn) == 0

    def test_above_threshold_dynamic(self, rng):
        g = random_scene(rng, n=1)
        g.speeds[:] = 0.0
        g.speeds[0, 0] = 0.5
        g.dirs[0, 0] = [1, 0, 0]
        _, dyn = split_static_dynamic(g, 1.0, 0.1)
        assert len(dyn) == 1

    def test_boundary_is_static(self, rng):
        # ||Gamma(1)|| == tau exactly goes to the static side
        g = random_scene(rng, n=1)
        g.speeds[:] = 0.0
        g.speeds[0, 0] = 0.25
        g.dirs[0, 0] = [1, 0, 0]
        st_set, dyn = split_static_dynamic(g, 1.0, 0.25)
        assert len(st_set) == 1 and len(dyn) == 0

    def test_partition_disjoint_exhaustive(self, rng):
        g = random_scene(rng, n=40, with_motion=True)
        st_set, dyn = split_static_dynamic(g, 5.0, 0.05)
        assert len(st_set) + len(dyn) == 40
        merged = np.vstack([st_set.mu, dyn.mu])
        assert {tuple(r) for r in merged} == {tuple(r) for r in g.mu}

    def test_invalid_threshold(self, rng):
        with pytest.raises(DataError):
            split_static_dynamic(random_scene(rng, n=2), 1.0, 0.0)


class TestFlowField:
    def test_static_zero(self, rng):
        g = random_scene(rng, n=5)
        g.speeds[:] = 0.0
        assert np.all(flow_field(g, 3.0) == 0)

    def test_matches_displacement_elementwise(self, rng):
        g = random_scene(rng, n=12, with_motion=True)
        flows = flow_field(g, 2.5)
        for i in range(12):
            np.testing.assert_allclose(
                flows[i], displacement(motion_coefficient(g.speeds[i], g.dirs[i]), 2.5))

    def test_constant_velocity_linearity(self, rng):
        g = random_scene(rng, n=7)
        g.speeds[:] = 0.0
        g.speeds[:, 0] = rng.normal(size=7)
        g.dirs[:, 0] = rng.normal(size=(7, 3))
        np.testing.assert_allclose(flow_field(g, 4.0), 2 * flow_field(g, 2.0), rtol=1e-12)
