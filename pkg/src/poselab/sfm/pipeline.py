"""Reconstruction driver: two-view bootstrap, incremental registration,
then alternating track refinement and staged bundle adjustment."""

import numpy as np

from ..errors import InsufficientMatchesError, PoselabError
from ..geometry import Intrinsics, Pose, quat_from_matrix
from .ba import bundle_adjust, reprojection_residuals, triangulate
from .pnp import localize_query
from .tracks import (
    FeatureTrack,
    PointCloud,
    SfmConfig,
    build_tracks,
    cluster_separation,
    overlap_criterion,
    spatial_consistency_filter,
)

MIN_INIT_TRACKS = 8
MAX_REFINE_ROUNDS = 8


def _essential_from_matches(xy_a, xy_b, intrinsics: Intrinsics):
    """Normalized 8-point essential matrix with cheirality-tested decomposition.

    Returns (R, t) with points mapping X_b = R X_a + t, plus triangulated
    depth masks for diagnostics.
    """
    Kinv = np.linalg.inv(intrinsics.matrix())
    ones = np.ones((len(xy_a), 1))
    xa = (np.hstack([xy_a, ones]) @ Kinv.T)[:, :3]
    xb = (np.hstack([xy_b, ones]) @ Kinv.T)[:, :3]

    def normalize(pts):
        mu = pts[:, :2].mean(axis=0)
        scale = np.sqrt(2.0) / max(1e-12, np.mean(
            np.linalg.norm(pts[:, :2] - mu, axis=1)))
        T = np.array([[scale, 0, -scale * mu[0]],
                      [0, scale, -scale * mu[1]],
                      [0, 0, 1.0]])
        return pts @ T.T, T

    na, Ta = normalize(xa)
    nb, Tb = normalize(xb)
    A = np.column_stack([
        nb[:, 0] * na[:, 0], nb[:, 0] * na[:, 1], nb[:, 0],
        nb[:, 1] * na[:, 0], nb[:, 1] * na[:, 1], nb[:, 1],
        na[:, 0], na[:, 1], np.ones(len(na)),
    ])
    _, _, vt = np.linalg.svd(A)
    E = vt[-1].reshape(3, 3)
    E = Tb.T @ E @ Ta
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    E = U @ np.diag([s, s, 0.0]) @ Vt
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R in (U @ Wm @ Vt, U @ Wm.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            candidates.append((R, t))

    def depth_count(R, t):
        # triangulate by midpoint along normalized rays
        good = 0
        for i in range(len(xa)):
            d_a = xa[i] / np.linalg.norm(xa[i])
            d_b_in_a = R.T @ (xb[i] / np.linalg.norm(xb[i]))
            o_b = -R.T @ t
            # solve [d_a, -d_b] [sa, sb]^T ~= o_b
            M = np.column_stack([d_a, -d_b_in_a])
            rhs = o_b
            sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            pa = sol[0] * d_a
            pb_in_a = o_b + sol[1] * d_b_in_a
            X = 0.5 * (pa + pb_in_a)
            za = X[2]
            zb = (R @ X + t)[2]
            if za > 0 and zb > 0:
                good += 1
        return good

    best = max(candidates, key=lambda rt: depth_count(*rt))
    return best


def gibbs_exclude(track: FeatureTrack, cameras: dict, intrinsics: Intrinsics,
                  enabled: bool, mm: int, seed: int = 0):
    """Leave-one-out observation pruning in a seeded random order.

    An observation is dropped iff re-triangulating without it lowers the
    track's mean reprojection error; passes repeat until a full pass makes
    no drop or only mm observations remain.  Returns (track, landmark).
    """
    obs = [(img, xy.copy()) for img, xy in track.observations
           if img in cameras]
    X = triangulate(obs, cameras, intrinsics)
    if not enabled or len(obs) < mm + 1:
        return FeatureTrack(track.track_id, obs, track.match_count), X
    rng = np.random.default_rng(seed)

    def mean_err(o, Xp):
        t = FeatureTrack(track.track_id, o, track.match_count)
        r = reprojection_residuals(t, Xp, cameras, intrinsics)
        return float(np.linalg.norm(r, axis=1).mean())

    improved = True
    while improved and len(obs) > mm:
        improved = False
        order = rng.permutation(len(obs))
        for k in order:
            if len(obs) <= mm:
                break
            remaining = [obs[i] for i in range(len(obs)) if i != k]
            try:
                X_new = triangulate(remaining, cameras, intrinsics)
            except PoselabError:
                continue
            e_now = mean_err(obs, X)
            e_new = mean_err(remaining, X_new)
            if e_new < e_now - 1e-9:
                obs = remaining
                X = X_new
                improved = True
                break
    return FeatureTrack(track.track_id, obs, track.match_count), X


def _register_camera(img_id, tracks, landmarks, cameras, intrinsics, config, seed):
    pts3d = []
    pts2d = []
    for track in tracks:
        if track.track_id not in landmarks:
            continue
        for img, xy in track.observations:
            if img == img_id:
                pts3d.append(landmarks[track.track_id])
                pts2d.append(xy)
    if len(pts3d) < 4:
        return None
    try:
        return localize_query(np.asarray(pts3d), np.asarray(pts2d), intrinsics,
                              inlier_threshold=max(config.ex, 1.0), seed=seed)
    except PoselabError:
        return None


def reconstruct(matchsets: list, intrinsics: Intrinsics, config: SfmConfig,
                pose_hints: dict = None, floor_grid: np.ndarray = None,
                seed: int = 0):
    """Full pipeline: filter, bootstrap, register, refine.

    Filter order follows the reconstruction flow: spatial consistency per
    pair, then the floor-grid overlap criterion (requires pose_hints and
    floor_grid; skipped otherwise), then track building, two-view geometry
    with triangulation, incremental registration, and alternating
    {cluster separation, leave-one-out exclusion, BA with frozen rotations}
    until the largest residual drops below ex, finished by a BA that also
    refines rotations.  Returns (PointCloud, tracks, info).
    """
    if len({ms.img_a for ms in matchsets} | {ms.img_b for ms in matchsets}) < 2:
        raise InsufficientMatchesError("need matches across at least two images")
    filtered = [spatial_consistency_filter(ms, config.sc) for ms in matchsets]
    if config.oc > 0 and pose_hints is not None and floor_grid is not None:
        admissible = overlap_criterion(pose_hints, floor_grid, config.oc, intrinsics)
        filtered = [ms for ms in filtered
                    if (min(ms.img_a, ms.img_b), max(ms.img_a, ms.img_b)) in admissible]
    filtered = [ms for ms in filtered if len(ms.xy_a) > 0]
    if not filtered:
        raise InsufficientMatchesError("all matches removed by filtering")
    tracks = build_tracks(filtered, config.mm)
    if not tracks:
        raise InsufficientMatchesError("no tracks satisfy the mm threshold")

    # initialization pair: most shared tracks
    pair_count = {}
    for track in tracks:
        imgs = track.images()
        for i in range(len(imgs)):
            for j in range(i + 1, len(imgs)):
                key = (min(imgs[i], imgs[j]), max(imgs[i], imgs[j]))
                pair_count[key] = pair_count.get(key, 0) + 1
    if not pair_count:
        raise InsufficientMatchesError("no image pair shares a track")
    (img0, img1), n_shared = max(pair_count.items(), key=lambda kv: (kv[1], kv[0]))
    if n_shared < MIN_INIT_TRACKS:
        raise InsufficientMatchesError(
            f"best pair shares only {n_shared} tracks (< {MIN_INIT_TRACKS})"
        )
    xy0, xy1 = [], []
    init_tracks = []
    for track in tracks:
        entry = dict(track.observations)
        if img0 in entry and img1 in entry:
            xy0.append(entry[img0])
            xy1.append(entry[img1])
            init_tracks.append(track)
    R, t = _essential_from_matches(np.asarray(xy0), np.asarray(xy1), intrinsics)
    cameras = {
        img0: Pose.identity(),
        img1: Pose(-R.T @ t, quat_from_matrix(R.T)),
    }

    def try_triangulate(track):
        obs = [(img, xy) for img, xy in track.observations if img in cameras]
        if len(obs) < 2:
            return None
        try:
            X = triangulate(obs, cameras, intrinsics)
        except PoselabError:
            return None
        rebuilt = FeatureTrack(track.track_id, obs, track.match_count)
        res = reprojection_residuals(rebuilt, X, cameras, intrinsics)
        # generous bootstrap bound; the refine loop tightens to ex
        if np.linalg.norm(res, axis=1).max() > max(50.0, 10 * config.ex):
            return None
        return X

    landmarks = {}
    for track in tracks:
        X = try_triangulate(track)
        if X is not None:
            landmarks[track.track_id] = X

    all_images = sorted({img for track in tracks for img in track.images()})
    pending = [img for img in all_images if img not in cameras]
    progress = True
    while pending and progress:
        progress = False
        for img in list(pending):
            pose = _register_camera(img, tracks, landmarks, cameras, intrinsics,
                                    config, seed)
            if pose is None:
                continue
            cameras[img] = pose
            pending.remove(img)
            progress = True
            for track in tracks:
                X = try_triangulate(track)
                if X is not None:
                    landmarks[track.track_id] = X
    if len(cameras) < 2:
        raise InsufficientMatchesError("could not register two cameras")

    cloud = PointCloud(landmarks, cameras, intrinsics)
    info = {"rounds": [], "unregistered": pending}
    active_tracks = [t for t in tracks if t.track_id in landmarks]
    next_track_id = max((t.track_id for t in tracks), default=0) + 1
    for round_idx in range(MAX_REFINE_ROUNDS):
        # cluster separation on current residuals
        new_tracks = []
        for track in active_tracks:
            X = cloud.landmarks.get(track.track_id)
            if X is None:
                continue
            res = reprojection_residuals(track, X, cloud.cameras, intrinsics)
            for piece in cluster_separation(track, res, config.mm, config.ex):
                if piece.track_id == -1:
                    piece = FeatureTrack(next_track_id, piece.observations,
                                         piece.match_count)
                    next_track_id += 1
                new_tracks.append(piece)
        active_tracks = new_tracks
        # leave-one-out exclusion and re-triangulation
        refreshed = {}
        kept_tracks = []
        for track in active_tracks:
            try:
                track2, X = gibbs_exclude(track, cloud.cameras, intrinsics,
                                          config.gibbs, config.mm,
                                          seed=seed + track.track_id)
            except PoselabError:
                continue
            if len(track2.observations) >= 2:
                refreshed[track2.track_id] = X
                kept_tracks.append(track2)
        active_tracks = kept_tracks
        cloud = PointCloud(refreshed, cloud.cameras, intrinsics)
        if len(cloud.landmarks) < MIN_INIT_TRACKS:
            raise InsufficientMatchesError("refinement discarded too many tracks")
        cloud, rms, ba_info = bundle_adjust(cloud, active_tracks,
                                            stage="rotations_fixed", config=config)
        max_res = 0.0
        for track in active_tracks:
            X = cloud.landmarks.get(track.track_id)
            if X is None:
                continue
            res = reprojection_residuals(track, X, cloud.cameras, intrinsics)
            max_res = max(max_res, float(np.linalg.norm(res, axis=1).max()))
        info["rounds"].append({"rms": rms, "max_residual": max_res,
                               "n_tracks": len(active_tracks)})
        if max_res < config.ex:
            break
    cloud, rms, ba_info = bundle_adjust(cloud, active_tracks, stage="final",
                                        config=config)
    info["final_rms"] = rms
    info["final_trace"] = ba_info["trace"]
    return cloud, active_tracks, info
