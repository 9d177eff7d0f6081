"""Staged sparse bundle adjustment with Levenberg-Marquardt.

Minimizes squared pixel reprojection error over landmark positions and
camera translations; camera rotations join only in the `final` stage.
The gauge is fixed by freezing camera 0 entirely and the length of the
camera-0 to camera-1 baseline (camera 1's translation moves on a sphere).

Observations whose residual exceeds `std` standard deviations of the
current residual distribution are weighted to zero for the remaining
iterations.  Accepted steps never increase the cost under the weight set
they were evaluated with.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import PoselabError
from ..geometry import Intrinsics, Pose, quat_exp, quat_multiply, quat_to_matrix
from .tracks import FeatureTrack, PointCloud, SfmConfig

LM_LAMBDA0 = 1e-3
LM_MAX_ITERS = 100
# ignore residuals below this many pixels when excluding observations
EXCLUDE_FLOOR = 1e-3


def project_point(pose: Pose, X: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Pixel of a world point; raises when the point is not in front."""
    local = quat_to_matrix(pose.q).T @ (X - pose.p)
    if local[2] <= 1e-12:
        raise PoselabError("point behind camera")
    return np.array([
        intrinsics.fx * local[0] / local[2] + intrinsics.cx,
        intrinsics.fy * local[1] / local[2] + intrinsics.cy,
    ])


def triangulate(observations: list, cameras: dict, intrinsics: Intrinsics) -> np.ndarray:
    """DLT triangulation from >= 2 (image_id, pixel) observations."""
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    K = intrinsics.matrix()
    rows = []
    for img, xy in observations:
        pose = cameras[img]
        W = quat_to_matrix(pose.q).T
        P = K @ np.column_stack([W, -W @ pose.p])
        rows.append(xy[0] * P[2] - P[0])
        rows.append(xy[1] * P[2] - P[1])
    A = np.asarray(rows)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-14:
        raise PoselabError("triangulation is degenerate")
    return Xh[:3] / Xh[3]


def reprojection_residuals(track: FeatureTrack, X: np.ndarray, cameras: dict,
                           intrinsics: Intrinsics) -> np.ndarray:
    """(n_obs, 2) pixel residuals projected - observed for one track."""
    out = np.zeros((len(track.observations), 2))
    for i, (img, xy) in enumerate(track.observations):
        pose = cameras[img]
        local = quat_to_matrix(pose.q).T @ (X - pose.p)
        z = local[2] if abs(local[2]) > 1e-12 else 1e-12
        out[i, 0] = intrinsics.fx * local[0] / z + intrinsics.cx - xy[0]
        out[i, 1] = intrinsics.fy * local[1] / z + intrinsics.cy - xy[1]
    return out


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _ortho_basis(u: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane perpendicular to unit vector u."""
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(u, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(u, b1)
    return np.column_stack([b1, b2])


@dataclass
class _Problem:
    cam_ids: list
    lm_ids: list
    obs: list  # (cam_id, lm_id, measured xy)
    stage: str
    baseline: float

    def layout(self):
        """Column offsets per parameter block."""
        cols = {}
        off = 0
        for cid in self.cam_ids[2:]:
            cols[("t", cid)] = off
            off += 3
        cols[("t1",)] = off
        off += 2  # camera 1: tangent of the fixed-length baseline sphere
        if self.stage == "final":
            for cid in self.cam_ids[1:]:
                cols[("r", cid)] = off
                off += 3
        for lid in self.lm_ids:
            cols[("X", lid)] = off
            off += 3
        return cols, off


def _residuals_and_jacobian(prob, cameras, landmarks, intrinsics, weights,
                            want_jacobian=True):
    cols, n_params = prob.layout()
    active = [i for i, w in enumerate(weights) if w > 0]
    r = np.zeros(2 * len(active))
    J = np.zeros((2 * len(active), n_params)) if want_jacobian else None
    c0 = cameras[prob.cam_ids[0]].p
    c1 = cameras[prob.cam_ids[1]].p
    u1 = (c1 - c0) / np.linalg.norm(c1 - c0)
    B1 = _ortho_basis(u1)
    for row, idx in enumerate(active):
        cid, lid, meas = prob.obs[idx]
        pose = cameras[cid]
        X = landmarks[lid]
        W = quat_to_matrix(pose.q).T
        local = W @ (X - pose.p)
        z = local[2]
        if z <= 1e-9:
            z = 1e-9
        fx, fy = intrinsics.fx, intrinsics.fy
        r[2 * row] = fx * local[0] / z + intrinsics.cx - meas[0]
        r[2 * row + 1] = fy * local[1] / z + intrinsics.cy - meas[1]
        if not want_jacobian:
            continue
        Jp = np.array([
            [fx / z, 0.0, -fx * local[0] / (z * z)],
            [0.0, fy / z, -fy * local[1] / (z * z)],
        ])
        JX = Jp @ W
        J[2 * row : 2 * row + 2, cols[("X", lid)] : cols[("X", lid)] + 3] = JX
        ci = prob.cam_ids.index(cid)
        if ci >= 2:
            off = cols[("t", cid)]
            J[2 * row : 2 * row + 2, off : off + 3] = -JX
        elif ci == 1:
            off = cols[("t1",)]
            J[2 * row : 2 * row + 2, off : off + 2] = -JX @ (prob.baseline * B1)
        if prob.stage == "final" and ci >= 1:
            off = cols[("r", cid)]
            J[2 * row : 2 * row + 2, off : off + 3] = Jp @ (-_skew(local))
    return r, J


def _apply_step(prob, cameras, landmarks, delta):
    cols, _ = prob.layout()
    cams = {cid: pose.copy() for cid, pose in cameras.items()}
    lms = {lid: X.copy() for lid, X in landmarks.items()}
    c0 = cams[prob.cam_ids[0]].p
    c1 = cams[prob.cam_ids[1]].p
    u1 = (c1 - c0) / np.linalg.norm(c1 - c0)
    B1 = _ortho_basis(u1)
    for cid in prob.cam_ids[2:]:
        off = cols[("t", cid)]
        cams[cid].p = cams[cid].p + delta[off : off + 3]
    off = cols[("t1",)]
    u_new = u1 + B1 @ delta[off : off + 2]
    u_new /= np.linalg.norm(u_new)
    cams[prob.cam_ids[1]].p = c0 + prob.baseline * u_new
    if prob.stage == "final":
        for cid in prob.cam_ids[1:]:
            off = cols[("r", cid)]
            theta = delta[off : off + 3]
            cams[cid] = Pose(cams[cid].p,
                             quat_multiply(cams[cid].q, quat_exp(-theta)))
    for lid in prob.lm_ids:
        off = cols[("X", lid)]
        lms[lid] = lms[lid] + delta[off : off + 3]
    return cams, lms


def bundle_adjust(cloud: PointCloud, tracks: list, stage: str = "rotations_fixed",
                  config: SfmConfig = None, max_iters: int = LM_MAX_ITERS):
    """LM refinement of a reconstruction.

    stage = 'rotations_fixed' optimizes landmarks + camera translations;
    stage = 'final' additionally optimizes camera rotations (camera 0 stays
    frozen).  Returns (refined cloud, rms over active observations, info)
    where info carries the accepted-cost trace, convergence flag, and the
    per-observation active mask keyed like the input tracks.
    """
    if stage not in ("rotations_fixed", "final"):
        raise ValueError(f"unknown stage {stage!r}")
    config = config or SfmConfig()
    cam_ids = sorted(cloud.cameras.keys())
    if len(cam_ids) < 2:
        raise PoselabError("bundle adjustment needs at least two cameras")
    obs = []
    obs_key = []
    for t_idx, track in enumerate(tracks):
        if track.track_id not in cloud.landmarks:
            continue
        for o_idx, (img, xy) in enumerate(track.observations):
            if img in cloud.cameras:
                obs.append((img, track.track_id, xy))
                obs_key.append((t_idx, o_idx))
    lm_counts = {}
    for cid, lid, _ in obs:
        lm_counts[lid] = lm_counts.get(lid, 0) + 1
    if any(c < 2 for c in lm_counts.values()):
        raise PoselabError("every landmark must be observed at least twice")
    lm_ids = sorted(lm_counts.keys())
    baseline = float(np.linalg.norm(cloud.cameras[cam_ids[1]].p
                                    - cloud.cameras[cam_ids[0]].p))
    if baseline < 1e-12:
        raise PoselabError("cameras 0 and 1 coincide; gauge is undefined")
    prob = _Problem(cam_ids, lm_ids, obs, stage, baseline)
    cameras = {cid: pose.copy() for cid, pose in cloud.cameras.items()}
    landmarks = {lid: cloud.landmarks[lid].copy() for lid in lm_ids}
    weights = np.ones(len(obs))

    def cost_of(cams, lms):
        r, _ = _residuals_and_jacobian(prob, cams, lms, cloud.intrinsics,
                                       weights, want_jacobian=False)
        return float(r @ r)

    def exclude_pass(cams, lms):
        # residual norms per active observation, one-sided sigma cut
        r, _ = _residuals_and_jacobian(prob, cams, lms, cloud.intrinsics,
                                       weights, want_jacobian=False)
        norms = np.hypot(r[0::2], r[1::2])
        active_idx = [i for i, w in enumerate(weights) if w > 0]
        if len(norms) < 3:
            return False
        thr = max(float(norms.mean() + config.std * norms.std()), EXCLUDE_FLOOR)
        changed = False
        counts = dict(lm_counts)
        for pos, i in enumerate(active_idx):
            if norms[pos] > thr and counts[obs[i][1]] > 2:
                weights[i] = 0.0
                counts[obs[i][1]] -= 1
                changed = True
        return changed

    lam = LM_LAMBDA0
    cost = cost_of(cameras, landmarks)
    trace = [cost]
    converged = False
    for _ in range(max_iters):
        r, J = _residuals_and_jacobian(prob, cameras, landmarks,
                                       cloud.intrinsics, weights)
        g = J.T @ r
        if np.linalg.norm(g, ord=np.inf) < 1e-12:
            converged = True
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag < 1e-12] = 1e-12
        accepted = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand_cams, cand_lms = _apply_step(prob, cameras, landmarks, delta)
            new_cost = cost_of(cand_cams, cand_lms)
            if new_cost < cost:
                cameras, landmarks = cand_cams, cand_lms
                trace.append(new_cost)
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        if exclude_pass(cameras, landmarks):
            cost = cost_of(cameras, landmarks)
        if len(trace) >= 2 and abs(trace[-2] - trace[-1]) < 1e-14 * max(1.0, trace[-2]):
            converged = True
            break
    r, _ = _residuals_and_jacobian(prob, cameras, landmarks, cloud.intrinsics,
                                   weights, want_jacobian=False)
    n_active = int((weights > 0).sum())
    rms = float(np.sqrt(r @ r / max(1, 2 * n_active)))
    refined = PointCloud(dict(landmarks), cameras, cloud.intrinsics)
    # carry over landmarks that were not part of the problem
    for lid, X in cloud.landmarks.items():
        refined.landmarks.setdefault(lid, X.copy())
    active_map = {}
    for i, (t_idx, o_idx) in enumerate(obs_key):
        active_map.setdefault(t_idx, {})[o_idx] = weights[i] > 0
    info = {
        "trace": trace,
        "converged": converged,
        "active": active_map,
        "n_active_obs": n_active,
        "n_obs": len(obs),
    }
    return refined, rms, info
