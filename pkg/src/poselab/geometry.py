"""Pose algebra, frame transforms, and evaluation metrics.

Conventions, fixed once for the whole toolkit:

* Quaternions are stored (w, x, y, z) and kept unit-norm.  q and -q encode
  the same rotation; canonicalization picks the representative with w >= 0.
* ``quat_to_matrix(q)`` is the local-to-world rotation: it maps vectors
  expressed in the pose's own frame into world coordinates.  Its transpose
  maps world vectors into the local frame, which is the matrix that turns a
  global position difference into a frame-local translation delta.
* A pose (p, q) therefore corresponds to the homogeneous transform
  T = [[R(q), p], [0, 1]], and the relative pose between a and b is
  inv(T_a) @ T_b.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateQuaternionError, ShapeError

QUAT_NORM_TOL = 1e-9


def quat_normalize(q) -> np.ndarray:
    """Scale q to unit norm and canonicalize the hemisphere (w >= 0)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ShapeError(f"quaternion must have shape (4,), got {q.shape}")
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise DegenerateQuaternionError(f"cannot normalize quaternion with norm {n}")
    if abs(n - 1.0) > 1e-12:
        q = q / n
    else:  # keep already-unit inputs bit-identical (idempotent)
        q = q.copy()
    if q[0] < 0.0:
        q = -q
    return q


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (local-to-world)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion of a rotation matrix, canonicalized (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeError(f"rotation matrix must be 3x3, got {R.shape}")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_exp(rotvec) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle, radians)."""
    v = np.asarray(rotvec, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        # second-order series keeps exp/log smooth through zero
        q = np.array([1.0 - angle**2 / 8.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    half = 0.5 * angle
    return quat_normalize(np.concatenate(([np.cos(half)], np.sin(half) * axis)))


def quat_log(q) -> np.ndarray:
    """Rotation vector of a unit quaternion; inverse of quat_exp on (-pi, pi]."""
    q = quat_normalize(q)
    w = min(1.0, max(-1.0, float(q[0])))
    vn = float(np.linalg.norm(q[1:]))
    if vn < 1e-12:
        return 2.0 * q[1:]  # small-angle: sin(a/2) ~ a/2
    angle = 2.0 * np.arctan2(vn, w)
    return angle * q[1:] / vn


def quat_angle_deg(qa, qb) -> float:
    """Geodesic angle between two rotations in degrees, sign-flip invariant."""
    d = abs(float(np.dot(quat_normalize(qa), quat_normalize(qb))))
    return float(np.degrees(2.0 * np.arccos(min(1.0, d))))


def rotate_vector(q, v) -> np.ndarray:
    """Apply the local-to-world rotation of q to a 3-vector."""
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


@dataclass
class Pose:
    """Absolute pose: position in meters plus unit quaternion (w, x, y, z).

    The quaternion is normalized and hemisphere-canonicalized on construction.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3).copy()
        self.q = quat_normalize(self.q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0, 0, 0]))

    def rotation(self) -> np.ndarray:
        """Local-to-world rotation matrix."""
        return quat_to_matrix(self.q)

    def world_to_local(self) -> np.ndarray:
        return quat_to_matrix(self.q).T

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous local-to-world transform."""
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.p
        return T

    def copy(self) -> "Pose":
        return Pose(self.p.copy(), self.q.copy())


@dataclass
class RelativePose:
    """Frame-local translation and rotation delta between consecutive poses."""

    dp: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        self.dp = np.asarray(self.dp, dtype=np.float64).reshape(3).copy()
        self.dq = quat_normalize(self.dq)

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.zeros(3), np.array([1.0, 0, 0, 0]))

    def copy(self) -> "RelativePose":
        return RelativePose(self.dp.copy(), self.dq.copy())


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def check_rotation_matrix(R, tol: float = QUAT_NORM_TOL) -> np.ndarray:
    """Validate orthonormality and det=+1; returns R as float64."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeError(f"rotation matrix must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return R


def relative_pose(a: Pose, b: Pose) -> RelativePose:
    """Delta from a to b expressed in a's local frame (inv(T_a) @ T_b)."""
    dp = quat_to_matrix(a.q).T @ (b.p - a.p)
    dq = quat_multiply(quat_conjugate(a.q), b.q)
    return RelativePose(dp, dq)


def compose(a: Pose, rel: RelativePose) -> Pose:
    """Apply a frame-local delta to a pose; inverse of relative_pose."""
    p = a.p + quat_to_matrix(a.q) @ rel.dp
    q = quat_multiply(a.q, rel.dq)
    return Pose(p, q)


def median_position_error(pred, gt) -> float:
    """Median Euclidean distance between paired positions, in meters."""
    pred = list(pred)
    gt = list(gt)
    if len(pred) != len(gt):
        raise ShapeError(f"stream length mismatch: {len(pred)} vs {len(gt)}")
    if not pred:
        raise ValueError("empty pose streams")
    d = [float(np.linalg.norm(a.p - b.p)) for a, b in zip(pred, gt)]
    return float(np.median(d))


def median_orientation_error(pred, gt) -> float:
    """Median geodesic orientation error between paired poses, in degrees."""
    pred = list(pred)
    gt = list(gt)
    if len(pred) != len(gt):
        raise ShapeError(f"stream length mismatch: {len(pred)} vs {len(gt)}")
    if not pred:
        raise ValueError("empty pose streams")
    d = [quat_angle_deg(a.q, b.q) for a, b in zip(pred, gt)]
    return float(np.median(d))


def improvement_percent(base: float, refined: float) -> float:
    """Positive percentage when `refined` is smaller than `base`."""
    if base <= 0:
        raise ValueError(f"baseline error must be positive, got {base}")
    return 100.0 * (base - refined) / base


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity transform (s, R, t) minimizing ||dst - (s R src + t)||^2.

    src, dst: (N, 3) paired point sets.  Returns (s, R, t).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError("umeyama_alignment needs matching (N, 3) arrays")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs**2).sum() / src.shape[0]
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


# --- pose stream CSV (shared by every module) --------------------------------

POSE_STREAM_HEADER = "t,px,py,pz,qw,qx,qy,qz"
REL_STREAM_HEADER = "t,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z"


def _fmt(x: float) -> str:
    return repr(float(x))


def save_pose_stream(path, poses) -> None:
    lines = [POSE_STREAM_HEADER]
    for i, pose in enumerate(poses):
        vals = [str(i)] + [_fmt(v) for v in np.concatenate([pose.p, pose.q])]
        lines.append(",".join(vals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pose_stream(path) -> list:
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != POSE_STREAM_HEADER:
            raise ValueError(f"unexpected pose stream header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            vals = [float(v) for v in parts[1:]]
            poses.append(Pose(np.array(vals[:3]), np.array(vals[3:])))
    return poses


def save_relative_stream(path, rels) -> None:
    lines = [REL_STREAM_HEADER]
    for i, rel in enumerate(rels):
        vals = [str(i + 1)] + [_fmt(v) for v in np.concatenate([rel.dp, rel.dq])]
        lines.append(",".join(vals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_relative_stream(path) -> list:
    rels = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != REL_STREAM_HEADER:
            raise ValueError(f"unexpected relative stream header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            vals = [float(v) for v in parts[1:]]
            rels.append(RelativePose(np.array(vals[:3]), np.array(vals[3:])))
    return rels
