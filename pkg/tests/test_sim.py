import math

import numpy as np
import pytest
import scipy.stats

from poselab import flow as flow_mod
from poselab import geometry, sim
from poselab.geometry import Pose, quat_angle_deg, quat_exp, quat_multiply
from poselab.sfm import triangulate


class TestProfilesAndScene:
    def test_robot_jitter_below_handheld(self):
        assert sim.ROBOT_PROFILE.pos_jitter < sim.HANDHELD_PROFILE.pos_jitter
        assert sim.ROBOT_PROFILE.rot_jitter_deg < sim.HANDHELD_PROFILE.rot_jitter_deg

    def test_scene_default_extent_matches_recorded_hall(self):
        box = sim.SceneSpec().box
        assert (box[1] - box[0], box[3] - box[2]) == (20.0, 16.0)

    def test_scene_validation(self):
        with pytest.raises(ValueError):
            sim.SceneSpec(landmark_count=4)
        with pytest.raises(ValueError):
            sim.SceneSpec(box=(0, 0, 0, 1, 0, 1))


class TestTrajectory:
    def test_zeroed_profile_constant_pose(self):
        frozen = sim.MotionProfile("robot", 0.0, 0.0, 0.0, 0.0, 0.0)
        poses = sim.generate_trajectory(frozen, 2.0, 23.0, seed=3)
        for p in poses[1:]:
            np.testing.assert_array_equal(p.p, poses[0].p)
            np.testing.assert_array_equal(p.q, poses[0].q)

    def test_step_bound_exhaustive(self):
        # oracle: scan every consecutive delta
        poses = sim.generate_trajectory(sim.ROBOT_PROFILE, 20.0, 23.0, seed=5)
        limit = sim.ROBOT_PROFILE.speed_max / 23.0
        deltas = [np.linalg.norm(b.p - a.p) for a, b in zip(poses, poses[1:])]
        assert max(deltas) <= limit + 1e-12

    def test_seed_reproducible(self):
        a = sim.generate_trajectory(sim.HANDHELD_PROFILE, 5.0, 23.0, seed=9)
        b = sim.generate_trajectory(sim.HANDHELD_PROFILE, 5.0, 23.0, seed=9)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.p, pb.p)
            np.testing.assert_array_equal(pa.q, pb.q)

    def test_stays_in_box(self):
        scene = sim.SceneSpec(box=(-1.0, 1.0, -1.0, 1.0, 0.0, 1.0))
        poses = sim.generate_trajectory(sim.ROBOT_PROFILE, 60.0, 23.0, seed=1,
                                        scene=scene)
        pts = np.array([p.p for p in poses])
        assert pts[:, 0].min() >= -1.0 and pts[:, 0].max() <= 1.0
        assert pts[:, 1].min() >= -1.0 and pts[:, 1].max() <= 1.0


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        K = sim.DEFAULT_INTRINSICS
        cam = sim.camera_from_yaw(np.zeros(3), 0.0)
        ids, px = sim.project_landmarks(np.array([[2.0, 0.0, 0.0]]), cam, K)
        assert list(ids) == [0]
        np.testing.assert_allclose(px[0], [K.cx, K.cy], atol=1e-9)

    def test_point_at_camera_center_excluded(self):
        cam = sim.camera_from_yaw(np.array([1.0, 2.0, 3.0]), 0.4)
        ids, _ = sim.project_landmarks(cam.p[None, :], cam, sim.DEFAULT_INTRINSICS)
        assert len(ids) == 0

    def test_behind_camera_excluded(self):
        cam = sim.camera_from_yaw(np.zeros(3), 0.0)  # looking along +x
        ids, _ = sim.project_landmarks(np.array([[-3.0, 0.0, 0.0]]), cam,
                                       sim.DEFAULT_INTRINSICS)
        assert len(ids) == 0

    def test_matrix_oracle(self, rng):
        # oracle: homogeneous K [R | t] projection
        K = sim.DEFAULT_INTRINSICS
        for _ in range(50):
            cam = sim.camera_from_yaw(rng.uniform(-2, 2, size=3),
                                      rng.uniform(0, 2 * np.pi),
                                      rng.uniform(-0.2, 0.2),
                                      rng.uniform(-0.2, 0.2))
            X = cam.p + sim.quat_to_matrix(cam.q) @ np.array([
                rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.0, 6.0)])
            W = sim.quat_to_matrix(cam.q).T
            P = K.matrix() @ np.column_stack([W, -W @ cam.p])
            xh = P @ np.append(X, 1.0)
            ids, px = sim.project_landmarks(X[None, :], cam, K,
                                            width=10_000, height=10_000)
            if len(ids):
                np.testing.assert_allclose(px[0], xh[:2] / xh[2], atol=1e-9)

    def test_triangulation_round_trip(self, rng):
        # project then triangulate recovers landmarks to 1e-6
        K = sim.DEFAULT_INTRINSICS
        cams = {0: sim.camera_from_yaw(np.array([0.0, 0, 1]), 0.1),
                1: sim.camera_from_yaw(np.array([0.5, 0.4, 1]), -0.1),
                2: sim.camera_from_yaw(np.array([0.2, -0.5, 1.2]), 0.0)}
        for _ in range(20):
            X = np.array([rng.uniform(3, 8), rng.uniform(-1, 1), rng.uniform(0, 2)])
            obs = []
            for cid, cam in cams.items():
                ids, px = sim.project_landmarks(X[None, :], cam, K,
                                                width=10_000, height=10_000)
                if len(ids):
                    obs.append((cid, px[0]))
            if len(obs) >= 2:
                np.testing.assert_allclose(triangulate(obs, cams, K), X, atol=1e-6)


class TestMatches:
    def setup_method(self):
        self.scene = sim.SceneSpec()
        self.lms = sim.generate_landmarks(self.scene, seed=2)
        c = self.scene.center()
        self.cam_a = sim.look_at_pose(c + [-3, 0, 0], c + [5, 0, 0])
        self.cam_b = sim.look_at_pose(c + [-3, 0.4, 0], c + [5, 0, 0])

    def test_exact_when_noiseless(self):
        ms = sim.synth_matches(self.lms, self.cam_a, self.cam_b,
                               sim.DEFAULT_INTRINSICS, 0.0, 0.0, seed=1)
        assert len(ms.xy_a) > 10
        assert not ms.is_outlier.any()
        for i in range(len(ms.xy_a)):
            lid = ms.landmark_id[i]
            ids, px = sim.project_landmarks(self.lms[lid][None, :], self.cam_a,
                                            sim.DEFAULT_INTRINSICS)
            np.testing.assert_allclose(ms.xy_a[i], px[0], atol=1e-12)

    def test_all_outliers(self):
        ms = sim.synth_matches(self.lms, self.cam_a, self.cam_b,
                               sim.DEFAULT_INTRINSICS, 0.0, 1.0, seed=1)
        assert ms.is_outlier.all()
        assert np.all(ms.landmark_id == -1)

    def test_noise_sigma_estimate(self):
        sigma = 0.5
        devs = []
        for seed in range(40):
            ms = sim.synth_matches(self.lms, self.cam_a, self.cam_b,
                                   sim.DEFAULT_INTRINSICS, sigma, 0.0, seed=seed)
            for i in range(len(ms.xy_a)):
                lid = ms.landmark_id[i]
                ids, px = sim.project_landmarks(self.lms[lid][None, :],
                                                self.cam_a, sim.DEFAULT_INTRINSICS)
                devs.extend((ms.xy_a[i] - px[0]).tolist())
        est = float(np.std(devs))
        assert abs(est - sigma) / sigma < 0.1


class TestSynthFlow:
    def test_identical_poses_zero_flow(self):
        cam = sim.camera_from_yaw(np.array([0.0, 0, 1]), 0.0)
        plane = sim.PlaneGeometry([4.0, 0, 0], [-1, 0, 0])
        f = sim.synth_flow(plane, cam, cam, sim.DEFAULT_INTRINSICS,
                           width=64, height=48)
        np.testing.assert_allclose(f.u, 0.0, atol=1e-10)
        np.testing.assert_allclose(f.v, 0.0, atol=1e-10)

    def test_fronto_parallel_translation(self):
        # closed form: uniform flow of magnitude fx * dx / depth
        K = sim.DEFAULT_INTRINSICS
        depth, dx = 3.0, 0.1
        cam_a = sim.camera_from_yaw(np.array([0.0, 0.0, 1.0]), 0.0)
        cam_b = sim.camera_from_yaw(np.array([0.0, -dx, 1.0]), 0.0)  # +x in cam frame
        plane = sim.PlaneGeometry([depth, 0, 0], [-1, 0, 0])
        f = sim.synth_flow(plane, cam_a, cam_b, K, width=64, height=48)
        expected = K.fx * dx / depth
        vals = np.abs(f.u[f.valid])
        assert np.allclose(vals, expected, atol=1e-9)
        assert np.abs(f.v[f.valid]).max() < 1e-9

    def test_roll_rotation_is_tangential(self):
        K = sim.DEFAULT_INTRINSICS
        cam_a = sim.camera_from_yaw(np.array([0.0, 0.0, 1.0]), 0.0)
        roll = np.radians(2.0)
        cam_b = Pose(cam_a.p, quat_multiply(cam_a.q, quat_exp([0, 0, roll])))
        plane = sim.PlaneGeometry([5.0, 0, 0], [-1, 0, 0])
        w, h = 640, 480
        f = sim.synth_flow(plane, cam_a, cam_b, K, width=w, height=h)
        # zero at the principal point
        cx, cy = int(round(K.cx)), int(round(K.cy))
        assert math.hypot(f.u[cy, cx], f.v[cy, cx]) < 0.05
        # flow perpendicular to the radius from the principal point
        yy, xx = np.mgrid[0:h, 0:w]
        rx = xx - K.cx
        ry = yy - K.cy
        radial = (f.u * rx + f.v * ry) / np.maximum(np.hypot(rx, ry), 1.0)
        assert np.abs(radial[f.valid]).max() < 0.05


class TestDegrade:
    def test_zero_noise_is_identity(self, rng):
        from conftest import random_pose
        stream = [random_pose(rng) for _ in range(20)]
        out, flags = sim.degrade_absolute(stream, 0.0, 0.0, 0.0, 0.0, seed=1)
        assert not flags.any()
        for a, b in zip(stream, out):
            np.testing.assert_array_equal(a.p, b.p)
            np.testing.assert_array_equal(a.q, b.q)

    def test_outlier_count_binomial(self, rng):
        from conftest import random_pose
        stream = [random_pose(rng) for _ in range(1000)]
        out, flags = sim.degrade_absolute(stream, 0.0, 0.0, 0.05, 1.0, seed=3)
        n = int(flags.sum())
        sigma = math.sqrt(1000 * 0.05 * 0.95)
        assert abs(n - 50) <= 3 * sigma
        for i in np.nonzero(flags)[0][:10]:
            assert np.linalg.norm(out[i].p - stream[i].p) == pytest.approx(1.0)

    def test_median_error_matches_chi_distribution(self, rng):
        # oracle: median of ||N(0, sigma^2 I_3)|| = sigma * sqrt(chi2_3 median)
        from conftest import random_pose
        sigma = 0.2
        stream = [random_pose(rng) for _ in range(4000)]
        out, _ = sim.degrade_absolute(stream, sigma, 0.0, 0.0, 0.0, seed=5)
        med = geometry.median_position_error(out, stream)
        expected = sigma * math.sqrt(scipy.stats.chi2.ppf(0.5, df=3))
        assert abs(med - expected) / expected < 0.05


class TestFlowCrossValidation:
    def test_synth_flow_agrees_with_lucas_kanade(self):
        """The two flow paths must agree on a textured planar render."""
        K = sim.DEFAULT_INTRINSICS
        depth = 4.0
        cam_a = sim.camera_from_yaw(np.array([0.0, 0.0, 1.0]), 0.0)
        cam_b = sim.camera_from_yaw(np.array([0.0, -0.02, 1.0]), 0.0)
        plane = sim.PlaneGeometry([depth, 0, 0], [-1, 0, 0])
        tex = sim.TextureField(seed=4, waves=30, min_freq=2.0, max_freq=12.0)
        img_a = sim.render_view(tex, plane, cam_a, K, width=320, height=240)
        img_b = sim.render_view(tex, plane, cam_b, K, width=320, height=240)
        K_small = sim.Intrinsics(K.fx / 2, K.fy / 2, K.cx / 2, K.cy / 2)
        analytic = sim.synth_flow(plane, cam_a, cam_b, K_small,
                                  width=320, height=240)
        lk = flow_mod.lucas_kanade(img_a, img_b, window=15, levels=2)
        interior = (slice(30, -30), slice(30, -30))
        du = np.abs(lk.u - analytic.u)[interior]
        dv = np.abs(lk.v - analytic.v)[interior]
        assert float(np.median(du)) < 0.3
        assert float(np.median(dv)) < 0.3
