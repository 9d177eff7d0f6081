"""Procedural generator of scenes, trajectories, and measurements.

Stands in for recorded datasets: ground-truth pose streams with robot or
handheld dynamics, wall/rack/floor landmark layouts with feature-poor holes,
noisy feature matches, analytic optical flow against piecewise-planar
geometry, and controlled degradation of absolute streams.  Every generator
is a pure function of (spec, seed).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .flow import FlowField, Image
from .geometry import (
    Intrinsics,
    Pose,
    quat_exp,
    quat_from_matrix,
    quat_multiply,
    quat_to_matrix,
)

# calibration used for all synthetic cameras (fx, fy, cx, cy)
DEFAULT_INTRINSICS = Intrinsics(548.44934818, 540.17600512, 317.73762648, 249.00614224)
DEFAULT_WIDTH = 640
DEFAULT_HEIGHT = 480


@dataclass(frozen=True)
class MotionProfile:
    """Speed/turn-rate envelope plus per-step jitter for a platform."""

    kind: str
    speed_min: float
    speed_max: float
    yaw_rate_max_deg: float
    pos_jitter: float
    rot_jitter_deg: float

    def __post_init__(self):
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("speed range must satisfy 0 <= min <= max")
        if self.pos_jitter < 0 or self.rot_jitter_deg < 0:
            raise ValueError("jitter must be non-negative")


ROBOT_PROFILE = MotionProfile("robot", 0.1, 0.5, 30.0, 0.002, 0.05)
HANDHELD_PROFILE = MotionProfile("handheld", 0.2, 1.5, 90.0, 0.02, 0.8)


@dataclass(frozen=True)
class SceneSpec:
    """Axis-aligned room with landmarks on walls, racks, and floor.

    box is (xmin, xmax, ymin, ymax, zmin, zmax) in meters.  hole_fraction
    models feature-poor stretches of wall that carry no landmarks.
    """

    box: tuple = (14.0, 34.0, 7.0, 23.0, 0.0, 4.0)
    landmark_count: int = 200
    wall_fraction: float = 0.6
    rack_fraction: float = 0.25
    floor_fraction: float = 0.15
    hole_fraction: float = 0.15

    def __post_init__(self):
        if self.landmark_count < 8:
            raise ValueError("landmark_count must be >= 8")
        xmin, xmax, ymin, ymax, zmin, zmax = self.box
        if not (xmax > xmin and ymax > ymin and zmax > zmin):
            raise ValueError("box extents must be positive")
        total = self.wall_fraction + self.rack_fraction + self.floor_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError("placement fractions must sum to 1")
        if not 0.0 <= self.hole_fraction < 1.0:
            raise ValueError("hole_fraction must be in [0, 1)")

    def center(self) -> np.ndarray:
        b = self.box
        return np.array([(b[0] + b[1]) / 2, (b[2] + b[3]) / 2, (b[4] + b[5]) / 2])


def camera_from_yaw(position, yaw, pitch: float = 0.0, roll: float = 0.0) -> Pose:
    """Camera pose with +z forward along the heading, +y down, +x right."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy * cp, sy * cp, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    R = np.column_stack([right, down, forward])
    if roll != 0.0:
        R = R @ quat_to_matrix(quat_exp(np.array([0.0, 0.0, roll])))
    return Pose(np.asarray(position, dtype=np.float64), quat_from_matrix(R))


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at eye with +z toward target and +y as close to -up as possible."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction is parallel to up")
    right = right / rn
    down = np.cross(forward, right)
    return Pose(eye, quat_from_matrix(np.column_stack([right, down, forward])))


def generate_trajectory(profile: MotionProfile, duration: float, rate: float,
                        seed: int, scene: SceneSpec = None) -> list:
    """Smooth seeded wander inside the scene box obeying the profile limits.

    Per-step translation (jitter included) never exceeds speed_max / rate.
    """
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    scene = scene or SceneSpec()
    rng = np.random.default_rng(seed)
    n = max(1, int(round(duration * rate)))
    xmin, xmax, ymin, ymax, zmin, zmax = scene.box
    margin = 0.1 * min(xmax - xmin, ymax - ymin)
    z_cam = zmin + 0.4 * (zmax - zmin)
    pos = np.array([
        rng.uniform(xmin + margin, xmax - margin),
        rng.uniform(ymin + margin, ymax - margin),
        z_cam,
    ])
    yaw = rng.uniform(0.0, 2 * np.pi)
    speed = rng.uniform(profile.speed_min, profile.speed_max)
    yaw_rate = 0.0
    max_step = profile.speed_max / rate
    yr_max = np.radians(profile.yaw_rate_max_deg)
    rj = np.radians(profile.rot_jitter_deg)
    poses = []
    for _ in range(n):
        pitch = rng.normal(0.0, rj) if rj > 0 else 0.0
        roll = rng.normal(0.0, rj) if rj > 0 else 0.0
        poses.append(camera_from_yaw(pos.copy(), yaw, pitch, roll))
        # first-order smoothing of speed / turn-rate targets
        speed += 0.1 * (rng.uniform(profile.speed_min, profile.speed_max) - speed)
        yaw_rate += 0.2 * (rng.uniform(-yr_max, yr_max) - yaw_rate)
        center = scene.center()
        near_wall = (
            pos[0] < xmin + margin or pos[0] > xmax - margin
            or pos[1] < ymin + margin or pos[1] > ymax - margin
        )
        if near_wall:
            to_center = np.arctan2(center[1] - pos[1], center[0] - pos[0])
            delta = (to_center - yaw + np.pi) % (2 * np.pi) - np.pi
            yaw_rate = np.clip(delta * rate * 0.2, -yr_max, yr_max) if yr_max > 0 else 0.0
        yaw += yaw_rate / rate
        step = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * (speed / rate)
        if profile.pos_jitter > 0:
            step = step + rng.normal(0.0, profile.pos_jitter, size=3)
        norm = float(np.linalg.norm(step))
        if norm > max_step:
            step *= (max_step / norm) if max_step > 0 else 0.0
        pos = pos + step
        pos[0] = np.clip(pos[0], xmin + 0.02, xmax - 0.02)
        pos[1] = np.clip(pos[1], ymin + 0.02, ymax - 0.02)
        pos[2] = np.clip(pos[2], zmin + 0.02, zmax - 0.02)
    return poses


def generate_landmarks(scene: SceneSpec, seed: int) -> np.ndarray:
    """(N, 3) landmark positions on walls, racks, and the floor.

    Wall landmarks skip the feature-poor hole band; rack landmarks sit on
    two interior divider planes.
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax, zmin, zmax = scene.box
    n = scene.landmark_count
    n_wall = int(round(n * scene.wall_fraction))
    n_rack = int(round(n * scene.rack_fraction))
    n_floor = n - n_wall - n_rack
    pts = []
    # walls: parameterize the room perimeter by arc length
    perim = 2 * (xmax - xmin) + 2 * (ymax - ymin)
    hole_lo = 0.5 * perim
    hole_hi = hole_lo + scene.hole_fraction * perim
    count = 0
    while count < n_wall:
        s = rng.uniform(0.0, perim)
        z = rng.uniform(zmin + 0.1 * (zmax - zmin), zmax)
        if hole_lo <= s < hole_hi:
            continue
        if s < xmax - xmin:
            p = [xmin + s, ymin, z]
        elif s < (xmax - xmin) + (ymax - ymin):
            p = [xmax, ymin + (s - (xmax - xmin)), z]
        elif s < 2 * (xmax - xmin) + (ymax - ymin):
            p = [xmax - (s - (xmax - xmin) - (ymax - ymin)), ymax, z]
        else:
            p = [xmin, ymax - (s - 2 * (xmax - xmin) - (ymax - ymin)), z]
        pts.append(p)
        count += 1
    # racks: two interior planes at 1/3 and 2/3 of x, partial height
    for _ in range(n_rack):
        rx = xmin + (xmax - xmin) * (1.0 / 3.0 if rng.random() < 0.5 else 2.0 / 3.0)
        pts.append([
            rx,
            rng.uniform(ymin + 0.2 * (ymax - ymin), ymax - 0.2 * (ymax - ymin)),
            rng.uniform(zmin, zmin + 0.6 * (zmax - zmin)),
        ])
    for _ in range(n_floor):
        pts.append([
            rng.uniform(xmin, xmax),
            rng.uniform(ymin, ymax),
            zmin,
        ])
    return np.asarray(pts, dtype=np.float64)


def project_landmarks(landmarks: np.ndarray, camera: Pose, intrinsics: Intrinsics,
                      width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT,
                      min_depth: float = 1e-9):
    """Visible (ids, pixels) under a pinhole camera; behind/outside excluded."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    local = (landmarks - camera.p) @ quat_to_matrix(camera.q)  # rows: R^T (X - p)
    z = local[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * local[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * local[:, 1] / z + intrinsics.cy
    ok = (z > min_depth) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    ids = np.nonzero(ok)[0]
    return ids, np.column_stack([u[ok], v[ok]])


@dataclass
class MatchSet:
    """Pairwise pixel matches with ground-truth bookkeeping for oracles."""

    img_a: int
    img_b: int
    xy_a: np.ndarray  # (M, 2)
    xy_b: np.ndarray  # (M, 2)
    landmark_id: np.ndarray  # (M,), -1 for outlier rows
    is_outlier: np.ndarray  # (M,) bool


def synth_matches(landmarks, pose_a: Pose, pose_b: Pose, intrinsics: Intrinsics,
                  noise_sigma: float = 0.0, outlier_rate: float = 0.0,
                  seed: int = 0, width: int = DEFAULT_WIDTH,
                  height: int = DEFAULT_HEIGHT) -> MatchSet:
    """Noisy matches between two views of the same landmark field."""
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    ids_a, px_a = project_landmarks(landmarks, pose_a, intrinsics, width, height)
    ids_b, px_b = project_landmarks(landmarks, pose_b, intrinsics, width, height)
    common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
    xy_a = px_a[ia] + rng.normal(0.0, noise_sigma, size=(len(common), 2))
    xy_b = px_b[ib] + rng.normal(0.0, noise_sigma, size=(len(common), 2))
    outlier = rng.random(len(common)) < outlier_rate
    n_out = int(outlier.sum())
    if n_out:
        xy_b[outlier, 0] = rng.uniform(0, width, size=n_out)
        xy_b[outlier, 1] = rng.uniform(0, height, size=n_out)
    lm = common.astype(np.int64)
    lm[outlier] = -1
    return MatchSet(0, 1, xy_a, xy_b, lm, outlier)


def synth_matches_multi(landmarks, poses, intrinsics: Intrinsics,
                        noise_sigma: float = 0.0, outlier_rate: float = 0.0,
                        seed: int = 0, min_shared: int = 8,
                        width: int = DEFAULT_WIDTH,
                        height: int = DEFAULT_HEIGHT) -> list:
    """Pairwise matches across many views with per-(view, landmark) noise.

    Noise is drawn once per observation, so the same landmark seen from the
    same camera carries identical pixels in every pair it appears in --
    the behavior of a real keypoint detector that downstream track merging
    relies on.
    """
    rng = np.random.default_rng(seed)
    obs = []
    for cam, pose in enumerate(poses):
        ids, px = project_landmarks(landmarks, pose, intrinsics, width, height)
        px = px + rng.normal(0.0, noise_sigma, size=px.shape)
        obs.append(dict(zip(ids.tolist(), px)))
    out = []
    for a in range(len(poses)):
        for b in range(a + 1, len(poses)):
            shared = sorted(set(obs[a]) & set(obs[b]))
            if len(shared) < min_shared:
                continue
            xy_a = np.array([obs[a][k] for k in shared])
            xy_b = np.array([obs[b][k] for k in shared])
            outlier = rng.random(len(shared)) < outlier_rate
            n_out = int(outlier.sum())
            if n_out:
                xy_b = xy_b.copy()
                xy_b[outlier, 0] = rng.uniform(0, width, size=n_out)
                xy_b[outlier, 1] = rng.uniform(0, height, size=n_out)
            lm = np.asarray(shared, dtype=np.int64)
            lm[outlier] = -1
            out.append(MatchSet(a, b, xy_a, xy_b, lm, outlier))
    return out


# --- analytic flow against piecewise-planar geometry ---------------------------


class PlaneGeometry:
    """Single infinite plane given by a point and outward normal."""

    def __init__(self, point, normal):
        self.point = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def ray_depth(self, origin, dirs):
        denom = dirs @ self.normal
        num = float((self.point - origin) @ self.normal)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        return t


class BoxGeometry:
    """Interior of an axis-aligned box; rays hit the nearest face."""

    def __init__(self, box):
        self.box = tuple(float(v) for v in box)

    def ray_depth(self, origin, dirs):
        xmin, xmax, ymin, ymax, zmin, zmax = self.box
        t_best = np.full(dirs.shape[0], np.inf)
        for axis, (lo, hi) in enumerate([(xmin, xmax), (ymin, ymax), (zmin, zmax)]):
            for bound in (lo, hi):
                d = dirs[:, axis]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (bound - origin[axis]) / d
                t = np.where((np.abs(d) > 1e-12) & (t > 1e-9), t, np.inf)
                hit = origin[None, :] + t[:, None] * dirs
                ok = np.ones(dirs.shape[0], dtype=bool)
                for other in range(3):
                    if other == axis:
                        continue
                    lo_o, hi_o = [(xmin, xmax), (ymin, ymax), (zmin, zmax)][other]
                    ok &= (hit[:, other] >= lo_o - 1e-9) & (hit[:, other] <= hi_o + 1e-9)
                t = np.where(ok, t, np.inf)
                t_best = np.minimum(t_best, t)
        return t_best


def _pixel_rays(intrinsics: Intrinsics, width: int, height: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dirs = np.stack(
        [
            (xx.ravel() - intrinsics.cx) / intrinsics.fx,
            (yy.ravel() - intrinsics.cy) / intrinsics.fy,
            np.ones(width * height),
        ],
        axis=1,
    )
    return dirs


def synth_flow(geometry, pose_a: Pose, pose_b: Pose, intrinsics: Intrinsics,
               width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> FlowField:
    """Analytic flow: back-project pixels of view A at scene depth, reproject
    into view B.  Pixels leaving B's frame are clamped and marked invalid."""
    dirs_cam = _pixel_rays(intrinsics, width, height)
    R_a = quat_to_matrix(pose_a.q)
    dirs_world = dirs_cam @ R_a.T
    t = geometry.ray_depth(pose_a.p, dirs_world)
    finite = np.isfinite(t)
    t_safe = np.where(finite, t, 1.0)
    world = pose_a.p[None, :] + t_safe[:, None] * dirs_world
    local_b = (world - pose_b.p) @ quat_to_matrix(pose_b.q)
    z = local_b[:, 2]
    ok = finite & (z > 1e-9)
    z_safe = np.where(ok, z, 1.0)
    u_b = intrinsics.fx * local_b[:, 0] / z_safe + intrinsics.cx
    v_b = intrinsics.fy * local_b[:, 1] / z_safe + intrinsics.cy
    inside = ok & (u_b >= 0) & (u_b <= width - 1) & (v_b >= 0) & (v_b <= height - 1)
    u_b = np.clip(u_b, 0, width - 1)
    v_b = np.clip(v_b, 0, height - 1)
    yy, xx = np.mgrid[0:height, 0:width]
    du = np.where(ok, u_b - xx.ravel(), 0.0).reshape(height, width)
    dv = np.where(ok, v_b - yy.ravel(), 0.0).reshape(height, width)
    return FlowField(du, dv, inside.reshape(height, width))


@dataclass
class TextureField:
    """Smooth band-limited world texture: seeded sum of 3-D sinusoids."""

    seed: int = 0
    waves: int = 24
    min_freq: float = 0.5
    max_freq: float = 4.0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.freqs = rng.uniform(self.min_freq, self.max_freq, size=(self.waves, 3))
        self.freqs *= rng.choice([-1.0, 1.0], size=(self.waves, 3))
        self.phases = rng.uniform(0.0, 2 * np.pi, size=self.waves)
        self.amps = rng.uniform(0.5, 1.0, size=self.waves)

    def sample(self, points: np.ndarray) -> np.ndarray:
        acc = np.zeros(points.shape[0])
        for k in range(self.waves):
            acc += self.amps[k] * np.sin(points @ self.freqs[k] + self.phases[k])
        lim = float(np.sum(self.amps))
        return 0.5 + 0.5 * acc / lim


def render_view(texture: TextureField, geometry, pose: Pose,
                intrinsics: Intrinsics, width: int = DEFAULT_WIDTH,
                height: int = DEFAULT_HEIGHT) -> Image:
    """Grayscale render of the planar scene under a pinhole camera."""
    dirs_cam = _pixel_rays(intrinsics, width, height)
    dirs_world = dirs_cam @ quat_to_matrix(pose.q).T
    t = geometry.ray_depth(pose.p, dirs_world)
    t = np.where(np.isfinite(t), t, 0.0)
    world = pose.p[None, :] + t[:, None] * dirs_world
    return Image(texture.sample(world).reshape(height, width))


def degrade_absolute(stream, sigma_p: float, sigma_q_deg: float,
                     outlier_rate: float, outlier_mag: float, seed: int):
    """Gaussian-perturbed pose stream with sparse gross position outliers.

    Returns (degraded poses, outlier flag array).
    """
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    flags = np.zeros(len(stream), dtype=bool)
    sq = np.radians(sigma_q_deg)
    for i, pose in enumerate(stream):
        p = pose.p + (rng.normal(0.0, sigma_p, size=3) if sigma_p > 0 else 0.0)
        q = pose.q
        if sq > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            q = quat_multiply(q, quat_exp(axis * rng.normal(0.0, sq)))
        if outlier_rate > 0 and rng.random() < outlier_rate:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            p = p + direction * outlier_mag
            flags[i] = True
        out.append(Pose(p, q))
    return out, flags


def exact_relative_stream(stream) -> list:
    """Frame-local deltas between consecutive ground-truth poses."""
    from .geometry import relative_pose

    return [relative_pose(stream[i], stream[i + 1]) for i in range(len(stream) - 1)]
