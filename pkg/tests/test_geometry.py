import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgepose.errors import PointBehindCamera
from edgepose.geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    inverse,
    project,
    project_points,
    transform_point,
    transform_points,
    unproject,
)

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng: np.random.Generator, max_angle=np.pi, box=2.0) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    t = rng.uniform(-box, box, 3)
    return Pose.from_axis_angle(axis, angle, t)


def pose_strategy():
    finite = st.floats(-1.0, 1.0, allow_nan=False)
    return st.builds(
        lambda ax, ay, az, angle, tx, ty, tz: Pose.from_axis_angle(
            [ax + 1e-3, ay, az], angle, (tx, ty, tz)),
        finite, finite, finite,
        st.floats(-math.pi, math.pi),
        finite, finite, finite,
    )


class TestPose:
    def test_quaternion_normalized_on_construction(self):
        p = Pose(q=[2.0, 0.0, 0.0, 0.0], t=[0, 0, 0])
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(q=[0, 0, 0, 0])

    def test_arrays_read_only(self):
        p = Pose.from_axis_angle([0, 0, 1], 0.5, (1, 2, 3))
        with pytest.raises(ValueError):
            p.t[0] = 9.0

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = random_pose(rng)
            p2 = Pose.from_matrix(p.matrix)
            assert p.rotation_angle_to(p2) < 1e-9
            assert p.translation_distance_to(p2) < 1e-12


class TestCompose:
    def test_identity(self):
        assert compose(Pose.identity(), Pose.identity()).rotation_angle_to(Pose.identity()) == 0

    def test_inverse_law(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = random_pose(rng)
            r = compose(p, inverse(p))
            assert r.rotation_angle_to(Pose.identity()) < 1e-9
            assert np.linalg.norm(r.t) < 1e-9

    def test_translation_then_rotation_matches_matrix_oracle(self):
        # translation (1,0,0) applied first, then rotation 90 deg about z
        trans = Pose(t=[1.0, 0.0, 0.0])
        rot = Pose.from_axis_angle([0, 0, 1], math.pi / 2)
        out = compose(rot, trans)
        np.testing.assert_allclose(out.t, [0.0, 1.0, 0.0], atol=1e-12)
        oracle = rot.matrix @ trans.matrix
        np.testing.assert_allclose(out.matrix, oracle, atol=1e-12)

    def test_matches_homogeneous_matrix_product(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(compose(a, b).matrix, a.matrix @ b.matrix, atol=1e-12)

    def test_associativity(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            assert lhs.rotation_angle_to(rhs) < 1e-9
            assert lhs.translation_distance_to(rhs) < 1e-9


class TestInverse:
    def test_identity(self):
        p = inverse(Pose.identity())
        assert np.allclose(p.q, [1, 0, 0, 0])
        assert np.allclose(p.t, 0)

    def test_translation_only(self):
        p = inverse(Pose(t=[1.0, 2.0, 3.0]))
        np.testing.assert_allclose(p.t, [-1, -2, -3], atol=1e-12)


class TestTransformPoint:
    def test_identity(self):
        np.testing.assert_allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])

    def test_pure_translation(self):
        np.testing.assert_allclose(transform_point(Pose(t=[0, 0, 1]), [0, 0, 0]), [0, 0, 1])

    @settings(max_examples=50, deadline=None)
    @given(pose_strategy(),
           st.tuples(*[st.floats(-5, 5) for _ in range(3)]),
           st.tuples(*[st.floats(-5, 5) for _ in range(3)]))
    def test_isometry(self, pose, a, b):
        a, b = np.array(a), np.array(b)
        d0 = np.linalg.norm(a - b)
        d1 = np.linalg.norm(transform_point(pose, a) - transform_point(pose, b))
        assert abs(d0 - d1) < 1e-10 * max(1.0, d0)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(17)
        p = random_pose(rng)
        pts = rng.normal(size=(10, 3))
        batch = transform_points(p, pts)
        for i in range(10):
            np.testing.assert_allclose(batch[i], transform_point(p, pts[i]), atol=1e-12)


class TestProject:
    def test_optical_axis(self):
        np.testing.assert_allclose(project([0, 0, 1], Pose.identity(), K), [320, 240])

    def test_analytic_offset(self):
        np.testing.assert_allclose(project([0.1, 0, 1], Pose.identity(), K), [370, 240])

    def test_behind_camera(self):
        with pytest.raises(PointBehindCamera):
            project([0, 0, -1], Pose.identity(), K)

    def test_distortion_matches_step_by_step_oracle(self):
        kd = CameraIntrinsics(fx=480.0, fy=510.0, cx=315.0, cy=245.0,
                              width=640, height=480, k1=0.1, k2=-0.03)
        rng = np.random.default_rng(23)
        for _ in range(50):
            pose = random_pose(rng, max_angle=0.5, box=0.3)
            pose = Pose(q=pose.q, t=pose.t + [0, 0, 3.0])
            pt = rng.uniform(-0.3, 0.3, 3)
            # independent step-by-step pinhole + radial distortion computation
            cam = pose.rotation_matrix @ pt + pose.t
            xn, yn = cam[0] / cam[2], cam[1] / cam[2]
            r2 = xn ** 2 + yn ** 2
            d = 1 + kd.k1 * r2 + kd.k2 * r2 ** 2
            expected = [kd.cx + kd.fx * xn * d, kd.cy + kd.fy * yn * d]
            np.testing.assert_allclose(project(pt, pose, kd), expected, atol=1e-9)

    def test_quaternion_sign_invariance(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            p = random_pose(rng, box=0.2)
            p = Pose(q=p.q, t=p.t + [0, 0, 2.0])
            flipped = Pose(q=-p.q, t=p.t)
            pt = rng.uniform(-0.2, 0.2, 3)
            np.testing.assert_allclose(project(pt, p, K), project(pt, flipped, K), atol=1e-12)

    def test_unproject_round_trip(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            pix = rng.uniform([0, 0], [639, 479])
            depth = rng.uniform(0.2, 10.0)
            pt = unproject(pix, depth, K)
            np.testing.assert_allclose(project(pt, Pose.identity(), K), pix, atol=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(37)
        pose = Pose(t=[0, 0, 2.0])
        pts = rng.uniform(-0.4, 0.4, (8, 3))
        batch = project_points(pts, pose, K)
        for i in range(8):
            np.testing.assert_allclose(batch[i], project(pts[i], pose, K), atol=1e-12)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=500, cx=0, cy=0, width=640, height=480)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=500, fy=500, cx=0, cy=0, width=0, height=480)

    def test_dict_round_trip(self):
        kd = CameraIntrinsics(fx=500.5, fy=501.25, cx=320.125, cy=240.0,
                              width=640, height=480, k1=0.1, k2=-0.02)
        assert CameraIntrinsics.from_dict(kd.to_dict()) == kd

    def test_scaled(self):
        s = K.scaled(0.5)
        assert s.fx == 250.0 and s.cx == 160.0 and s.width == 320
