"""Core geometry: transforms, rotations, Kabsch, spatial index."""

import numpy as np
import pytest

from spinkit.errors import DegenerateConfiguration
from spinkit.geometry import (
    RigidTransform,
    SpatialIndex,
    alignment_residual,
    apply_transform,
    kabsch,
    median_spacing,
    minimal_rotation_to_z,
    random_rotation,
    rotation_about_z,
)


def linear_scan_radius(points, center, radius):
    """Brute-force oracle for radius queries."""
    out = []
    for i, p in enumerate(points):
        if np.linalg.norm(p - center) <= radius:
            out.append(i)
    return np.array(out, dtype=np.intp)


class TestRigidTransform:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(0)
        cloud = rng.normal(size=(50, 3))
        out = apply_transform(RigidTransform.identity(), cloud)
        assert np.array_equal(out, cloud)

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), [0.0, 0.0, 1.0])
        out = apply_transform(t, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(out[0], [1.0, 2.0, 4.0])

    def test_matches_per_point_matrix_oracle(self):
        rng = np.random.default_rng(1)
        rot = random_rotation(rng)
        tr = rng.normal(size=3)
        cloud = rng.normal(size=(100, 3))
        out = apply_transform(RigidTransform(rot, tr), cloud)
        expected = np.stack([rot @ p + tr for p in cloud])
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_round_trip_through_inverse(self):
        rng = np.random.default_rng(2)
        t = RigidTransform(random_rotation(rng), rng.normal(size=3))
        cloud = rng.normal(size=(40, 3))
        back = apply_transform(t.inverse(), apply_transform(t, cloud))
        assert np.max(np.abs(back - cloud)) < 1e-9

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestRotationAboutZ:
    def test_zero_angle_is_identity(self):
        np.testing.assert_array_equal(rotation_about_z(0.0), np.eye(3))

    def test_quarter_turn(self):
        out = rotation_about_z(np.pi / 2) @ np.array([1.0, 0.0, 0.0])
        assert np.max(np.abs(out - [0.0, 1.0, 0.0])) < 1e-12

    def test_group_law(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.uniform(-np.pi, np.pi, size=2)
            lhs = rotation_about_z(a) @ rotation_about_z(b)
            rhs = rotation_about_z(a + b)
            assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestMinimalRotationToZ:
    def test_already_aligned(self):
        np.testing.assert_allclose(minimal_rotation_to_z([0, 0, 1.0]), np.eye(3), atol=1e-15)

    def test_x_axis(self):
        rot = minimal_rotation_to_z([1.0, 0, 0])
        assert np.max(np.abs(rot @ [1.0, 0, 0] - [0, 0, 1.0])) < 1e-12

    def test_antipodal_convention(self):
        rot = minimal_rotation_to_z([0, 0, -1.0])
        out = rot @ np.array([0, 0, -1.0])
        assert np.max(np.abs(out - [0, 0, 1.0])) < 1e-12
        assert np.max(np.abs(rot.T @ rot - np.eye(3))) < 1e-12

    def test_random_axes_map_to_z_and_stay_orthonormal(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rot = minimal_rotation_to_z(axis)
            assert np.max(np.abs(rot @ axis - [0, 0, 1.0])) < 1e-9
            assert np.max(np.abs(rot.T @ rot - np.eye(3))) < 1e-12
            assert abs(np.linalg.det(rot) - 1.0) < 1e-12


class TestKabsch:
    def test_identity_case(self):
        rng = np.random.default_rng(5)
        cloud = rng.normal(size=(30, 3))
        t = kabsch(cloud, cloud)
        assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-12
        assert np.max(np.abs(t.translation)) < 1e-12

    def test_pure_translation(self):
        rng = np.random.default_rng(6)
        cloud = rng.normal(size=(30, 3))
        t = kabsch(cloud, cloud + [1.0, 0.0, 0.0])
        assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-12
        assert np.max(np.abs(t.translation - [1.0, 0.0, 0.0])) < 1e-12

    def test_construct_then_recover(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
            src = rng.normal(size=(25, 3))
            dst = apply_transform(truth, src)
            est = kabsch(src, dst)
            assert np.linalg.norm(est.rotation - truth.rotation) < 1e-9
            assert np.linalg.norm(est.translation - truth.translation) < 1e-9

    def test_invariant_to_common_rigid_motion(self):
        rng = np.random.default_rng(8)
        src = rng.normal(size=(40, 3))
        dst = src + rng.normal(scale=0.05, size=(40, 3))
        base = alignment_residual(kabsch(src, dst), src, dst)
        g = RigidTransform(random_rotation(rng), rng.normal(size=3))
        gsrc, gdst = apply_transform(g, src), apply_transform(g, dst)
        moved = alignment_residual(kabsch(gsrc, gdst), gsrc, gdst)
        assert abs(base - moved) < 1e-9

    def test_planar_points_recover_proper_rotation(self):
        # Rank-2 cross-covariance: the smallest singular pair is free up to
        # sign, so this exercises the reflection correction.
        rng = np.random.default_rng(12)
        for _ in range(20):
            xy = rng.normal(size=(30, 2))
            src = np.column_stack([xy, np.zeros(30)])
            truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
            dst = apply_transform(truth, src)
            est = kabsch(src, dst)
            assert abs(np.linalg.det(est.rotation) - 1.0) < 1e-9
            assert np.linalg.norm(est.rotation - truth.rotation) < 1e-9

    def test_degenerate_collinear(self):
        line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            kabsch(line, line + [0.0, 0.0, 1.0])


class TestSpatialIndex:
    def test_degenerate_zero_radius(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
        idx = SpatialIndex(pts)
        assert list(idx.radius_query([1.0, 0, 0], 0.0)) == [1]

    def test_far_query_is_empty(self):
        rng = np.random.default_rng(9)
        idx = SpatialIndex(rng.normal(size=(100, 3)))
        assert len(idx.radius_query([100.0, 100.0, 100.0], 1.0)) == 0

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            n = rng.integers(1, 60)
            pts = rng.normal(size=(n, 3))
            idx = SpatialIndex(pts)
            center = rng.normal(size=3) * 1.5
            radius = rng.uniform(0.0, 2.0)
            got = idx.radius_query(center, radius)
            expected = linear_scan_radius(pts, center, radius)
            assert np.array_equal(got, expected)

    def test_many_matches_single(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(200, 3))
        idx = SpatialIndex(pts)
        centers = rng.normal(size=(20, 3))
        batched = idx.radius_query_many(centers, 0.7)
        for center, got in zip(centers, batched):
            assert np.array_equal(got, idx.radius_query(center, 0.7))

    def test_boundary_is_inclusive(self):
        pts = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        idx = SpatialIndex(pts)
        assert list(idx.radius_query([0.0, 0.0, 0.0], 1.0)) == [0]


def test_median_spacing_on_grid():
    xs = np.arange(10, dtype=np.float64)
    grid = np.array([[x, y, 0.0] for x in xs for y in xs])
    assert median_spacing(grid) == pytest.approx(1.0)
