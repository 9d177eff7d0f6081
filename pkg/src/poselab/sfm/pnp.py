"""Query localization: P3P minimal solves inside RANSAC plus LM refinement.

The minimal solver is Grunert's three-point resection (quartic in the
distance ratio, following the classical derivation), disambiguated by the
consensus score over all correspondences.
"""

import numpy as np

from ..errors import LocalizationFailure
from ..geometry import (
    Intrinsics,
    Pose,
    quat_exp,
    quat_from_matrix,
    quat_multiply,
    quat_to_matrix,
)

RANSAC_ITERS = 256
REFINE_ITERS = 30


def _bearings(pts2d: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    d = np.column_stack([
        (pts2d[:, 0] - intrinsics.cx) / intrinsics.fx,
        (pts2d[:, 1] - intrinsics.cy) / intrinsics.fy,
        np.ones(len(pts2d)),
    ])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    """R, t with dst = R src + t (least squares, no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def solve_p3p(pts3d: np.ndarray, pts2d: np.ndarray, intrinsics: Intrinsics) -> list:
    """Camera pose candidates from exactly three 2D-3D correspondences."""
    if pts3d.shape != (3, 3) or pts2d.shape != (3, 2):
        raise ValueError("solve_p3p needs exactly three correspondences")
    f = _bearings(pts2d, intrinsics)
    P1, P2, P3 = pts3d
    a = float(np.linalg.norm(P2 - P3))
    b = float(np.linalg.norm(P1 - P3))
    c = float(np.linalg.norm(P1 - P2))
    if min(a, b, c) < 1e-12 or b < 1e-12:
        return []
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])
    aa = (a * a - c * c) / (b * b)
    bb = (a * a + c * c) / (b * b)
    # Grunert's quartic in v = s3 / s1
    A4 = (aa - 1.0) ** 2 - 4.0 * c * c / (b * b) * cos_a**2
    A3 = 4.0 * (aa * (1.0 - aa) * cos_b
                - (1.0 - bb) * cos_a * cos_g
                + 2.0 * c * c / (b * b) * cos_a**2 * cos_b)
    A2 = 2.0 * (aa * aa - 1.0
                + 2.0 * aa * aa * cos_b**2
                + 2.0 * (b * b - c * c) / (b * b) * cos_a**2
                - 4.0 * bb * cos_a * cos_b * cos_g
                + 2.0 * (b * b - a * a) / (b * b) * cos_g**2)
    A1 = 4.0 * (-aa * (1.0 + aa) * cos_b
                + 2.0 * a * a / (b * b) * cos_g**2 * cos_b
                - (1.0 - bb) * cos_a * cos_g)
    A0 = (1.0 + aa) ** 2 - 4.0 * a * a / (b * b) * cos_g**2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if np.max(np.abs(coeffs)) < 1e-15:
        return []
    roots = np.roots(coeffs)
    poses = []
    for root in roots:
        if abs(root.imag) > 1e-8:
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = 2.0 * (cos_g - v * cos_a)
        if abs(denom) < 1e-12:
            continue
        u = ((-1.0 + aa) * v * v - 2.0 * aa * cos_b * v + 1.0 + aa) / denom
        if u <= 0:
            continue
        s1_sq = b * b / (1.0 + v * v - 2.0 * v * cos_b)
        if s1_sq <= 0:
            continue
        s1 = float(np.sqrt(s1_sq))
        q_cam = np.vstack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        W, t = _rigid_fit(pts3d, q_cam)  # camera = W * world + t
        center = -W.T @ t
        poses.append(Pose(center, quat_from_matrix(W.T)))
    return poses


def _reproj_errors(pose: Pose, pts3d, pts2d, intrinsics) -> np.ndarray:
    local = (pts3d - pose.p) @ quat_to_matrix(pose.q)
    z = local[:, 2]
    bad = z <= 1e-9
    z = np.where(bad, 1.0, z)
    u = intrinsics.fx * local[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * local[:, 1] / z + intrinsics.cy
    err = np.hypot(u - pts2d[:, 0], v - pts2d[:, 1])
    return np.where(bad, np.inf, err)


def refine_pose(pose: Pose, pts3d, pts2d, intrinsics,
                iters: int = REFINE_ITERS) -> Pose:
    """Pose-only LM on reprojection residuals."""
    p = pose.p.copy()
    q = pose.q.copy()
    lam = 1e-6

    def residuals(p_, q_):
        local = (pts3d - p_) @ quat_to_matrix(q_)
        z = np.maximum(local[:, 2], 1e-9)
        u = intrinsics.fx * local[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * local[:, 1] / z + intrinsics.cy
        return np.column_stack([u - pts2d[:, 0], v - pts2d[:, 1]]).ravel()

    cost = float(residuals(p, q) @ residuals(p, q))
    for _ in range(iters):
        W = quat_to_matrix(q).T
        local = (pts3d - p) @ W.T
        z = np.maximum(local[:, 2], 1e-9)
        n = len(pts3d)
        J = np.zeros((2 * n, 6))
        r = np.zeros(2 * n)
        for i in range(n):
            li = local[i]
            fx, fy = intrinsics.fx, intrinsics.fy
            Jp = np.array([
                [fx / z[i], 0.0, -fx * li[0] / (z[i] * z[i])],
                [0.0, fy / z[i], -fy * li[1] / (z[i] * z[i])],
            ])
            J[2 * i : 2 * i + 2, 0:3] = -Jp @ W
            J[2 * i : 2 * i + 2, 3:6] = Jp @ np.array([
                [0.0, li[2], -li[1]],
                [-li[2], 0.0, li[0]],
                [li[1], -li[0], 0.0],
            ])
            r[2 * i] = fx * li[0] / z[i] + intrinsics.cx - pts2d[i, 0]
            r[2 * i + 1] = fy * li[1] / z[i] + intrinsics.cy - pts2d[i, 1]
        g = J.T @ r
        if np.linalg.norm(g, ord=np.inf) < 1e-14:
            break
        A = J.T @ J
        stepped = False
        while lam < 1e10:
            try:
                delta = np.linalg.solve(A + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p + delta[0:3]
            q_new = quat_multiply(q, quat_exp(-delta[3:6]))
            r_new = residuals(p_new, q_new)
            c_new = float(r_new @ r_new)
            if c_new < cost:
                p, q, cost = p_new, q_new, c_new
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
    return Pose(p, q)


def localize_query(pts3d, pts2d, intrinsics: Intrinsics,
                   inlier_threshold: float = 2.0, iterations: int = RANSAC_ITERS,
                   seed: int = 0) -> Pose:
    """RANSAC P3P localization refined on the inlier set.

    Raises LocalizationFailure below four correspondences or when no sample
    reaches a four-point consensus.
    """
    pts3d = np.asarray(pts3d, dtype=np.float64)
    pts2d = np.asarray(pts2d, dtype=np.float64)
    n = len(pts3d)
    if n < 4 or len(pts2d) != n:
        raise LocalizationFailure(
            f"need >= 4 matched correspondences, got {n} / {len(pts2d)}"
        )
    rng = np.random.default_rng(seed)
    best_pose = None
    best_inliers = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        for cand in solve_p3p(pts3d[idx], pts2d[idx], intrinsics):
            err = _reproj_errors(cand, pts3d, pts2d, intrinsics)
            inl = err < inlier_threshold
            count = int(inl.sum())
            if count > best_count:
                best_count = count
                best_pose = cand
                best_inliers = inl
    if best_pose is None or best_count < 4:
        raise LocalizationFailure("no consensus pose found")
    pose = refine_pose(best_pose, pts3d[best_inliers], pts2d[best_inliers],
                       intrinsics)
    err = _reproj_errors(pose, pts3d, pts2d, intrinsics)
    inl = err < inlier_threshold
    if int(inl.sum()) >= 4:
        pose = refine_pose(pose, pts3d[inl], pts2d[inl], intrinsics)
    return pose
