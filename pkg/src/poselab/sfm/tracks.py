"""Match filtering, feature tracks, and the reconstruction data model."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from ..geometry import Intrinsics, Pose, quat_to_matrix
from ..sim import MatchSet


@dataclass
class SfmConfig:
    """Reconstruction hyperparameters.

    sc     spatial-consistency neighborhood in pixels (0 disables)
    oc     required overlap of visible floor-grid points between images, %
    mm     minimal observations per track
    ex     reprojection-error separation limit in pixels
    gibbs  enable leave-one-out observation exclusion
    std    standard-deviation multiplier for observation exclusion in BA
    """

    sc: float = 0.0
    oc: float = 0.0
    mm: int = 3
    ex: float = 2.0
    gibbs: bool = False
    std: float = 3.0

    def __post_init__(self):
        if self.sc < 0:
            raise ValueError("sc must be >= 0")
        if not 0.0 <= self.oc <= 100.0:
            raise ValueError("oc must be in [0, 100]")
        if self.mm < 2:
            raise ValueError("mm must be >= 2")
        if self.ex <= 0:
            raise ValueError("ex must be positive")
        if self.std <= 0:
            raise ValueError("std must be positive")


@dataclass
class FeatureTrack:
    """One landmark's observations: (image id, pixel) with one entry per image."""

    track_id: int
    observations: list  # [(image_id, np.ndarray (2,))]
    match_count: int = 0

    def __post_init__(self):
        imgs = [img for img, _ in self.observations]
        if len(set(imgs)) != len(imgs):
            raise ValueError("track holds two observations in the same image")

    def images(self):
        return [img for img, _ in self.observations]


@dataclass
class PointCloud:
    """Reconstruction result: landmark positions plus camera poses."""

    landmarks: dict  # track_id -> np.ndarray (3,)
    cameras: dict  # image_id -> Pose
    intrinsics: Intrinsics


def spatial_consistency_filter(matches: MatchSet, sc: float) -> MatchSet:
    """Keep matches whose pixel neighborhood moves coherently.

    For each match, neighbors are other matches within sc pixels in image A;
    the fraction whose counterparts stay within sc pixels in image B must
    exceed 0.5.  Matches without neighbors are kept.  sc = 0 disables.
    """
    if sc < 0:
        raise ValueError("sc must be >= 0")
    if sc == 0.0 or len(matches.xy_a) == 0:
        return matches
    xy_a = matches.xy_a
    xy_b = matches.xy_b
    n = len(xy_a)
    da = np.linalg.norm(xy_a[:, None, :] - xy_a[None, :, :], axis=2)
    db = np.linalg.norm(xy_b[:, None, :] - xy_b[None, :, :], axis=2)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        neigh = (da[i] <= sc) & (np.arange(n) != i)
        total = int(neigh.sum())
        if total == 0:
            continue
        coherent = int((neigh & (db[i] <= sc)).sum())
        keep[i] = coherent / total > 0.5
    return MatchSet(
        matches.img_a, matches.img_b,
        xy_a[keep], xy_b[keep],
        matches.landmark_id[keep], matches.is_outlier[keep],
    )


def make_floor_grid(box, nx: int = 20, ny: int = 16) -> np.ndarray:
    """Regular grid of points on the floor plane of an axis-aligned box."""
    xmin, xmax, ymin, ymax, zmin = box[0], box[1], box[2], box[3], box[4]
    xs = np.linspace(xmin, xmax, nx)
    ys = np.linspace(ymin, ymax, ny)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, zmin)])


def _visible_grid(pose: Pose, grid: np.ndarray, intrinsics: Intrinsics,
                  width: int, height: int) -> np.ndarray:
    local = (grid - pose.p) @ quat_to_matrix(pose.q)
    z = local[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * local[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * local[:, 1] / z + intrinsics.cy
    return (z > 1e-9) & (u >= 0) & (u < width) & (v >= 0) & (v < height)


def overlap_criterion(poses: dict, grid: np.ndarray, oc: float,
                      intrinsics: Intrinsics, width: int = 640,
                      height: int = 480) -> set:
    """Image pairs whose visible floor-grid points overlap by at least oc%.

    Overlap is the Jaccard fraction |common| / |either| of grid points each
    camera sees.  oc = 0 admits every pair.
    """
    if not 0.0 <= oc <= 100.0:
        raise ValueError("oc must be in [0, 100]")
    ids = sorted(poses.keys())
    vis = {i: _visible_grid(poses[i], grid, intrinsics, width, height) for i in ids}
    admissible = set()
    for ai, a in enumerate(ids):
        for b in ids[ai + 1 :]:
            if oc == 0.0:
                admissible.add((a, b))
                continue
            union = int((vis[a] | vis[b]).sum())
            inter = int((vis[a] & vis[b]).sum())
            frac = 100.0 * inter / union if union else 0.0
            if frac >= oc:
                admissible.add((a, b))
    return admissible


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, k):
        self.parent.setdefault(k, k)
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra
        return ra


def build_tracks(matchsets: list, mm: int) -> list:
    """Merge pairwise matches into multi-view tracks.

    Keypoints are identified by exact (image, pixel) values.  A merge that
    would put two different pixels of the same image into one track is
    rejected, keeping tracks single-valued per image.  Tracks with fewer
    than mm observations are dropped.
    """
    uf = _UnionFind()
    images_of = {}  # root -> {image_id: (x, y)}
    match_count = {}  # root -> supporting match rows

    def key(img, xy):
        return (img, float(xy[0]), float(xy[1]))

    for ms in matchsets:
        for i in range(len(ms.xy_a)):
            ka = key(ms.img_a, ms.xy_a[i])
            kb = key(ms.img_b, ms.xy_b[i])
            ra, rb = uf.find(ka), uf.find(kb)
            ia = images_of.setdefault(ra, {ka[0]: (ka[1], ka[2])})
            ib = images_of.setdefault(rb, {kb[0]: (kb[1], kb[2])})
            if ra == rb:
                match_count[ra] = match_count.get(ra, 0) + 1
                continue
            conflict = any(
                img in ia and ia[img] != pix for img, pix in ib.items()
            )
            if conflict:
                continue
            root = uf.union(ka, kb)
            other = rb if root == ra else ra
            merged = images_of.pop(other)
            images_of[root] = {**images_of.get(root, {}), **merged}
            match_count[root] = match_count.get(ra, 0) + match_count.get(rb, 0) + 1
            match_count.pop(other, None)
    tracks = []
    next_id = 0
    for root in sorted(images_of.keys()):
        entry = images_of[root]
        if len(entry) < max(2, mm):
            continue
        obs = [(img, np.array(entry[img])) for img in sorted(entry.keys())]
        tracks.append(FeatureTrack(next_id, obs, match_count.get(root, 0)))
        next_id += 1
    return tracks


def _two_means_1pass(vectors: np.ndarray, assign: np.ndarray):
    c0 = vectors[assign == 0].mean(axis=0)
    c1 = vectors[assign == 1].mean(axis=0)
    d0 = np.linalg.norm(vectors - c0, axis=1)
    d1 = np.linalg.norm(vectors - c1, axis=1)
    new = (d1 < d0).astype(np.int64)
    sse = float(np.sum(np.minimum(d0, d1) ** 2))
    return new, sse


def _two_means(vectors: np.ndarray) -> np.ndarray:
    """2-means assignment; exhaustive for small sets, Lloyd otherwise."""
    n = len(vectors)
    if n <= 10:
        best, best_sse = None, np.inf
        for mask in range(1, 2 ** (n - 1)):
            assign = np.array([(mask >> i) & 1 for i in range(n)], dtype=np.int64)
            if assign.sum() in (0, n):
                continue
            c0 = vectors[assign == 0].mean(axis=0)
            c1 = vectors[assign == 1].mean(axis=0)
            sse = float(
                np.sum((vectors[assign == 0] - c0) ** 2)
                + np.sum((vectors[assign == 1] - c1) ** 2)
            )
            if sse < best_sse:
                best, best_sse = assign, sse
        return best
    d = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    assign = (np.linalg.norm(vectors - vectors[j], axis=1)
              < np.linalg.norm(vectors - vectors[i], axis=1)).astype(np.int64)
    if assign.sum() in (0, len(vectors)):
        assign[j] = 1 - assign[j]
    for _ in range(50):
        new, _ = _two_means_1pass(vectors, assign)
        if new.sum() in (0, len(vectors)) or np.array_equal(new, assign):
            break
        assign = new
    return assign


def cluster_separation(track: FeatureTrack, residuals: np.ndarray, mm: int,
                       ex: float) -> list:
    """Split a track by 2-means on its reprojection residual vectors.

    Triggered when any residual norm exceeds ex pixels.  Clusters smaller
    than mm observations are discarded; the result is 0, 1, or 2 tracks.
    """
    residuals = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    if residuals.shape[0] != len(track.observations):
        raise ShapeError("one residual vector per observation required")
    norms = np.linalg.norm(residuals, axis=1)
    if norms.max() <= ex:
        return [track]
    if len(track.observations) < 2:
        return [track]
    assign = _two_means(residuals)
    out = []
    for cluster in (0, 1):
        obs = [track.observations[i] for i in np.nonzero(assign == cluster)[0]]
        if len(obs) >= mm:
            out.append(FeatureTrack(track.track_id if not out else -1,
                                    obs, track.match_count))
    return out


# --- CSV formats ---------------------------------------------------------------

MATCH_HEADER = "img_a,img_b,xa,ya,xb,yb"


def save_matches_csv(path, matchsets: list) -> None:
    lines = [MATCH_HEADER]
    for ms in matchsets:
        for i in range(len(ms.xy_a)):
            lines.append(
                f"{ms.img_a},{ms.img_b},{float(ms.xy_a[i,0])!r},{float(ms.xy_a[i,1])!r},"
                f"{float(ms.xy_b[i,0])!r},{float(ms.xy_b[i,1])!r}"
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matches_csv(path) -> list:
    groups = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != MATCH_HEADER:
            raise ValueError(f"unexpected match header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, b, xa, ya, xb, yb = line.split(",")
            groups.setdefault((int(a), int(b)), []).append(
                (float(xa), float(ya), float(xb), float(yb))
            )
    out = []
    for (a, b), rows in sorted(groups.items()):
        arr = np.asarray(rows, dtype=np.float64)
        n = len(rows)
        out.append(MatchSet(a, b, arr[:, 0:2], arr[:, 2:4],
                            np.full(n, -1, dtype=np.int64),
                            np.zeros(n, dtype=bool)))
    return out


def save_point_cloud(path, cloud: PointCloud) -> None:
    lines = ["LANDMARKS id,x,y,z"]
    for lid in sorted(cloud.landmarks.keys()):
        x, y, z = cloud.landmarks[lid]
        lines.append(f"{lid},{x!r},{y!r},{z!r}")
    lines.append("CAMERAS id,px,py,pz,qw,qx,qy,qz")
    for cid in sorted(cloud.cameras.keys()):
        pose = cloud.cameras[cid]
        vals = ",".join(repr(float(v)) for v in np.concatenate([pose.p, pose.q]))
        lines.append(f"{cid},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_point_cloud(path, intrinsics: Intrinsics) -> PointCloud:
    landmarks = {}
    cameras = {}
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("LANDMARKS"):
                section = "landmarks"
                continue
            if line.startswith("CAMERAS"):
                section = "cameras"
                continue
            parts = line.split(",")
            if section == "landmarks":
                landmarks[int(parts[0])] = np.array([float(v) for v in parts[1:4]])
            elif section == "cameras":
                vals = [float(v) for v in parts[1:]]
                cameras[int(parts[0])] = Pose(np.array(vals[:3]), np.array(vals[3:]))
            else:
                raise ValueError("point cloud file missing section header")
    return PointCloud(landmarks, cameras, intrinsics)
