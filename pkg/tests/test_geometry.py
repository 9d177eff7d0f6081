import mpmath
import numpy as np
import pytest

from conftest import random_pose, random_relative
from poselab import geometry
from poselab.errors import DegenerateQuaternionError, ShapeError
from poselab.geometry import (
    Intrinsics,
    Pose,
    RelativePose,
    check_rotation_matrix,
    compose,
    improvement_percent,
    median_orientation_error,
    median_position_error,
    quat_angle_deg,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    relative_pose,
)


class TestQuatNormalize:
    def test_identity(self):
        np.testing.assert_array_equal(quat_normalize([1, 0, 0, 0]), [1, 0, 0, 0])

    def test_pure_scaling(self):
        np.testing.assert_allclose(quat_normalize([2, 0, 0, 0]), [1, 0, 0, 0])

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateQuaternionError):
            quat_normalize([0.0, 0.0, 0.0, 0.0])

    def test_random_against_extended_precision(self, rng):
        # oracle: norm computed with 50-digit arithmetic
        for _ in range(200):
            q = rng.uniform(-1, 1, size=4)
            if np.linalg.norm(q) < 1e-3:
                continue
            with mpmath.workdps(50):
                n = mpmath.sqrt(mpmath.fsum([mpmath.mpf(v) ** 2 for v in q]))
                expected = np.array([float(mpmath.mpf(v) / n) for v in q])
            if expected[0] < 0:
                expected = -expected
            np.testing.assert_allclose(quat_normalize(q), expected, atol=1e-15)

    def test_hemisphere(self, rng):
        for _ in range(50):
            q = rng.uniform(-1, 1, size=4)
            if np.linalg.norm(q) < 1e-3:
                continue
            assert quat_normalize(q)[0] >= 0.0


class TestRelativeCompose:
    def test_identity_pair(self, rng):
        a = random_pose(rng)
        rel = relative_pose(a, a)
        np.testing.assert_allclose(rel.dp, 0.0, atol=1e-12)
        np.testing.assert_allclose(rel.dq, [1, 0, 0, 0], atol=1e-12)

    def test_identity_frame(self):
        a = Pose.identity()
        b = Pose([1, 2, 3], [1, 0, 0, 0])
        rel = relative_pose(a, b)
        np.testing.assert_allclose(rel.dp, [1, 2, 3], atol=1e-12)

    def test_matrix_oracle(self, rng):
        # oracle: translation/rotation blocks of inv(T_a) @ T_b
        for _ in range(100):
            a = random_pose(rng)
            b = random_pose(rng)
            rel = relative_pose(a, b)
            T = np.linalg.inv(a.matrix()) @ b.matrix()
            np.testing.assert_allclose(rel.dp, T[:3, 3], atol=1e-9)
            np.testing.assert_allclose(quat_to_matrix(rel.dq), T[:3, :3], atol=1e-9)

    def test_compose_identity(self, rng):
        a = random_pose(rng)
        out = compose(a, RelativePose.identity())
        np.testing.assert_allclose(out.p, a.p, atol=1e-12)
        np.testing.assert_allclose(out.q, a.q, atol=1e-12)

    def test_compose_translation(self):
        out = compose(Pose.identity(), RelativePose([1, 0, 0], [1, 0, 0, 0]))
        np.testing.assert_allclose(out.p, [1, 0, 0], atol=1e-12)

    def test_round_trip_10k(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            a = random_pose(rng)
            rel = random_relative(rng)
            b = compose(a, rel)
            rel2 = relative_pose(a, b)
            assert np.abs(rel2.dp - rel.dp).max() < 1e-9
            assert min(np.abs(rel2.dq - rel.dq).max(),
                       np.abs(rel2.dq + rel.dq).max()) < 1e-9
            assert abs(np.linalg.norm(b.q) - 1.0) < 1e-9


class TestRotationMatrix:
    def test_orthonormal_and_det(self, rng):
        for _ in range(200):
            q = quat_normalize(rng.uniform(-1, 1, size=4))
            R = quat_to_matrix(q)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9
            check_rotation_matrix(R)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            check_rotation_matrix(np.diag([1.0, 1.0, -1.0]))

    def test_log_exp_round_trip(self, rng):
        for _ in range(100):
            v = rng.uniform(-2, 2, size=3)
            np.testing.assert_allclose(quat_log(quat_exp(v)), v, atol=1e-9)


class TestMedians:
    def test_exact_match(self, rng):
        poses = [random_pose(rng) for _ in range(9)]
        assert median_position_error(poses, poses) == 0.0
        assert median_orientation_error(poses, poses) == 0.0

    def test_3_4_5(self):
        a = [Pose.identity()]
        b = [Pose([3, 4, 0], [1, 0, 0, 0])]
        assert median_position_error(b, a) == pytest.approx(5.0, abs=1e-12)

    def test_90_degrees(self):
        gt = [Pose.identity()]
        s = np.sqrt(0.5)
        pred = [Pose([0, 0, 0], [s, 0, 0, s])]
        assert median_orientation_error(pred, gt) == pytest.approx(90.0, abs=1e-9)

    def test_sign_flip_invariance(self, rng):
        q = quat_normalize(rng.uniform(-1, 1, size=4))
        assert quat_angle_deg(q, -q) == pytest.approx(0.0, abs=1e-6)

    def test_against_sort_oracle(self, rng):
        # brute-force oracle: sort distances, mean of central order statistics
        for n in range(1, 51):
            pred = [random_pose(rng) for _ in range(n)]
            gt = [random_pose(rng) for _ in range(n)]
            d = sorted(float(np.linalg.norm(a.p - b.p)) for a, b in zip(pred, gt))
            expected = d[n // 2] if n % 2 else 0.5 * (d[n // 2 - 1] + d[n // 2])
            assert median_position_error(pred, gt) == pytest.approx(expected, rel=1e-12)

    def test_101_random_pairs(self, rng):
        pred = [random_pose(rng) for _ in range(101)]
        gt = [random_pose(rng) for _ in range(101)]
        d = sorted(float(np.linalg.norm(a.p - b.p)) for a, b in zip(pred, gt))
        assert median_position_error(pred, gt) == pytest.approx(d[50], rel=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            median_position_error([], [])
        with pytest.raises(ShapeError):
            median_position_error([Pose.identity()], [])


class TestImprovement:
    def test_paper_values(self):
        assert improvement_percent(0.2417, 0.1620) == pytest.approx(33.0, abs=0.05)
        assert improvement_percent(0.4406, 0.2606) == pytest.approx(40.9, abs=0.05)

    def test_no_change(self):
        assert improvement_percent(0.5, 0.5) == 0.0

    def test_nonpositive_base(self):
        with pytest.raises(ValueError):
            improvement_percent(0.0, 0.1)
        with pytest.raises(ValueError):
            improvement_percent(-1.0, 0.1)


class TestIntrinsics:
    def test_matrix_layout(self):
        K = Intrinsics(500.0, 400.0, 320.0, 240.0).matrix()
        assert K[0, 0] == 500.0 and K[1, 1] == 400.0
        assert K[0, 2] == 320.0 and K[1, 2] == 240.0

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 1.0, 0.0, 0.0)


class TestStreamFiles:
    def test_pose_round_trip(self, rng, tmp_path):
        poses = [random_pose(rng) for _ in range(17)]
        path = tmp_path / "stream.csv"
        geometry.save_pose_stream(path, poses)
        header = path.read_text().splitlines()[0]
        assert header == "t,px,py,pz,qw,qx,qy,qz"
        loaded = geometry.load_pose_stream(path)
        for a, b in zip(poses, loaded):
            np.testing.assert_array_equal(a.p, b.p)
            np.testing.assert_array_equal(a.q, b.q)

    def test_relative_round_trip(self, rng, tmp_path):
        rels = [random_relative(rng) for _ in range(9)]
        path = tmp_path / "rel.csv"
        geometry.save_relative_stream(path, rels)
        loaded = geometry.load_relative_stream(path)
        for a, b in zip(rels, loaded):
            np.testing.assert_array_equal(a.dp, b.dp)
            np.testing.assert_array_equal(a.dq, b.dq)
