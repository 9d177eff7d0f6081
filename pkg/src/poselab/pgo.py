"""Chunked pose-graph optimization.

A stream of absolute poses (node priors) is refined against relative pose
measurements (edges between consecutive nodes).  Long streams are split
into fixed-size chunks with overlap; chunks are optimized independently
with Levenberg-Marquardt and stitched by linear-ramp blending across the
overlap.  Rotation residuals use the quaternion log map around the current
estimate, keeping the problem unconstrained.

The chain structure makes nodes three apart independent (they share no
residual block), so the Jacobian is built from central differences over
three interleaved node classes at full vector width.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .geometry import Pose, quat_normalize

DEFAULT_CHUNK_SIZE = 100
DEFAULT_OVERLAP = 20
LM_MAX_ITERS = 50
FD_EPS = 1e-7


@dataclass(frozen=True)
class PgoWeights:
    w_abs_p: float = 1.0
    w_abs_q: float = 1.0
    w_rel_p: float = 10.0
    w_rel_q: float = 10.0

    def __post_init__(self):
        if min(self.w_abs_p, self.w_abs_q, self.w_rel_p, self.w_rel_q) <= 0:
            raise ValueError("all weights must be positive")


@dataclass
class PoseGraph:
    """Nodes initialized from the absolute stream plus consecutive edges."""

    nodes: list  # [Pose]
    edges: list  # [RelativePose], len(nodes) - 1
    weights: PgoWeights = field(default_factory=PgoWeights)

    def __post_init__(self):
        if len(self.edges) != max(0, len(self.nodes) - 1):
            raise ShapeError(
                f"edge count {len(self.edges)} != node count {len(self.nodes)} - 1"
            )


@dataclass
class ChunkPlan:
    chunk_size: int
    overlap: int
    ranges: list  # [(start, end)], end exclusive


def plan_chunks(n: int, chunk_size: int = DEFAULT_CHUNK_SIZE,
                overlap: int = DEFAULT_OVERLAP) -> ChunkPlan:
    """Chunk k covers [k*(size-overlap), min(n, k*(size-overlap)+size))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if chunk_size < 1 or not 0 <= overlap < chunk_size:
        raise ValueError(
            f"need 0 <= overlap < chunk_size, got {overlap} / {chunk_size}"
        )
    stride = chunk_size - overlap
    ranges = []
    k = 0
    while k * stride < n:
        start = k * stride
        ranges.append((start, min(n, start + chunk_size)))
        k += 1
    return ChunkPlan(chunk_size, overlap, ranges)


# --- batched quaternion helpers (rows of (N, 4) arrays) -------------------------


def _q_mul(a, b):
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def _q_conj(q):
    out = q.copy()
    out[:, 1:] *= -1.0
    return out


def _q_log(q):
    """Rotation vectors of unit quaternions, batched."""
    w = np.clip(np.abs(q[:, 0]), 0.0, 1.0)
    sign = np.where(q[:, 0] < 0, -1.0, 1.0)
    v = q[:, 1:] * sign[:, None]
    vn = np.linalg.norm(v, axis=1)
    angle = 2.0 * np.arctan2(vn, w)
    small = vn < 1e-12
    factor = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return factor[:, None] * v


def _q_exp(rv):
    """Unit quaternions from rotation vectors, batched."""
    angle = np.linalg.norm(rv, axis=1)
    small = angle < 1e-12
    half = 0.5 * angle
    w = np.cos(half)
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    q = np.concatenate([w[:, None], k[:, None] * rv], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _q_rot_conj(q, v):
    """Rows of R(q)^T v: rotate world vectors into each node's local frame."""
    u = -q[:, 1:]
    w = q[:, 0][:, None]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


class _ChunkProblem:
    """Residuals and coloring-based FD Jacobian for one chunk."""

    def __init__(self, graph: PoseGraph):
        self.n = len(graph.nodes)
        self.w = graph.weights
        self.abs_p = np.array([nd.p for nd in graph.nodes])
        self.abs_q = np.array([nd.q for nd in graph.nodes])
        self.rel_dp = np.array([e.dp for e in graph.edges])
        self.rel_dq = np.array([e.dq for e in graph.edges])
        self.sp = np.sqrt(self.w.w_abs_p)
        self.sq = np.sqrt(self.w.w_abs_q)
        self.rp = np.sqrt(self.w.w_rel_p)
        self.rq = np.sqrt(self.w.w_rel_q)

    def residuals(self, p, q):
        n = self.n
        r = np.empty(6 * n + 6 * (n - 1))
        r[: 3 * n] = (self.sp * (p - self.abs_p)).ravel()
        r[3 * n : 6 * n] = (self.sq * _q_log(_q_mul(_q_conj(self.abs_q), q))).ravel()
        dp = _q_rot_conj(q[:-1], p[1:] - p[:-1])
        r[6 * n : 6 * n + 3 * (n - 1)] = (self.rp * (dp - self.rel_dp)).ravel()
        dq = _q_mul(_q_conj(q[:-1]), q[1:])
        r[6 * n + 3 * (n - 1) :] = (
            self.rq * _q_log(_q_mul(_q_conj(self.rel_dq), dq))
        ).ravel()
        return r

    def node_rows(self, i):
        """Residual rows affected by node i."""
        n = self.n
        rows = list(range(3 * i, 3 * i + 3))
        rows += list(range(3 * n + 3 * i, 3 * n + 3 * i + 3))
        if i > 0:
            e = i - 1
            rows += list(range(6 * n + 3 * e, 6 * n + 3 * e + 3))
            rows += list(range(6 * n + 3 * (n - 1) + 3 * e,
                               6 * n + 3 * (n - 1) + 3 * e + 3))
        if i < n - 1:
            e = i
            rows += list(range(6 * n + 3 * e, 6 * n + 3 * e + 3))
            rows += list(range(6 * n + 3 * (n - 1) + 3 * e,
                               6 * n + 3 * (n - 1) + 3 * e + 3))
        return np.asarray(rows)

    def apply_delta(self, p, q, dp, dth):
        p2 = p + dp
        q2 = _q_mul(q, _q_exp(dth))
        q2 /= np.linalg.norm(q2, axis=1, keepdims=True)
        return p2, q2

    def jacobian(self, p, q):
        """Central differences over three interleaved node classes.

        Nodes i and i+3 never share a residual block, so one residual
        evaluation yields Jacobian columns for a whole class at once.
        """
        n = self.n
        J = np.zeros((6 * n + 6 * (n - 1), 6 * n))
        for color in range(min(3, n)):
            idx = np.arange(color, n, 3)
            rows_of = {i: self.node_rows(i) for i in idx}
            for k in range(6):
                dp = np.zeros((n, 3))
                dth = np.zeros((n, 3))
                tgt = dp if k < 3 else dth
                tgt[idx, k % 3] = FD_EPS
                r_plus = self.residuals(*self.apply_delta(p, q, dp, dth))
                tgt[idx, k % 3] = -FD_EPS
                r_minus = self.residuals(*self.apply_delta(p, q, dp, dth))
                diff = (r_plus - r_minus) / (2.0 * FD_EPS)
                for i in idx:
                    rows = rows_of[i]
                    J[rows, 6 * i + k] = diff[rows]
        return J


def optimize_chunk(graph: PoseGraph, max_iters: int = LM_MAX_ITERS):
    """LM refinement of one chunk; returns (poses, info).

    info["trace"] is the accepted-cost sequence; accepted steps never
    increase the cost.  info["converged"] is False when the iteration cap
    was hit while progress was still possible.
    """
    n = len(graph.nodes)
    if n < 2:
        raise ShapeError("optimize_chunk needs at least two nodes")
    prob = _ChunkProblem(graph)
    p = prob.abs_p.copy()
    q = prob.abs_q.copy()
    r = prob.residuals(p, q)
    cost = float(r @ r)
    trace = [cost]
    lam = 1e-4
    converged = False
    for _ in range(max_iters):
        J = prob.jacobian(p, q)
        g = J.T @ r
        if np.linalg.norm(g, ord=np.inf) < 1e-10:
            converged = True
            break
        A = J.T @ J
        diag = np.clip(np.diag(A).copy(), 1e-12, None)
        stepped = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new, q_new = prob.apply_delta(
                p, q, delta.reshape(n, 6)[:, :3], delta.reshape(n, 6)[:, 3:]
            )
            r_new = prob.residuals(p_new, q_new)
            c_new = float(r_new @ r_new)
            if c_new < cost:
                p, q, r, cost = p_new, q_new, r_new, c_new
                trace.append(cost)
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            converged = True
            break
        if len(trace) >= 2 and trace[-2] - trace[-1] < 1e-15 * max(1.0, trace[-2]):
            converged = True
            break
    poses = [Pose(p[i], q[i]) for i in range(n)]
    return poses, {"trace": trace, "converged": converged}


def _slerp(qa, qb, t):
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    d = float(np.dot(qa, qb))
    if d < 0:
        qb = -qb
        d = -d
    if d > 1.0 - 1e-12:
        return quat_normalize((1.0 - t) * qa + t * qb)
    theta = np.arccos(min(1.0, d))
    s = np.sin(theta)
    return quat_normalize(
        (np.sin((1.0 - t) * theta) / s) * qa + (np.sin(t * theta) / s) * qb
    )


def refine_stream(abs_stream: list, rel_stream: list,
                  weights: PgoWeights = None, plan: ChunkPlan = None,
                  max_iters: int = LM_MAX_ITERS):
    """Chunked refinement of a full pose stream.

    Overlapping chunk results are blended with a linear ramp: at overlap
    position j of V the newer chunk carries weight (j+1)/(V+1), so weights
    always sum to one and no chunk switches abruptly.
    """
    n = len(abs_stream)
    if len(rel_stream) != max(0, n - 1):
        raise ShapeError(
            f"relative stream length {len(rel_stream)} != {n} - 1"
        )
    if n == 1:
        return [abs_stream[0].copy()]
    weights = weights or PgoWeights()
    plan = plan or plan_chunks(n)
    out = [None] * n
    cover = 0
    for start, end in plan.ranges:
        if end - start < 2:
            for idx in range(start, end):
                if out[idx] is None:
                    out[idx] = abs_stream[idx].copy()
            cover = max(cover, end)
            continue
        graph = PoseGraph(
            [abs_stream[i] for i in range(start, end)],
            [rel_stream[i] for i in range(start, end - 1)],
            weights,
        )
        refined, _ = optimize_chunk(graph, max_iters=max_iters)
        overlap_end = min(cover, end)
        v = max(0, overlap_end - start)
        for idx in range(start, end):
            new_pose = refined[idx - start]
            if idx < overlap_end and out[idx] is not None:
                t = (idx - start + 1) / (v + 1)
                out[idx] = Pose(
                    (1.0 - t) * out[idx].p + t * new_pose.p,
                    _slerp(out[idx].q, new_pose.q, t),
                )
            else:
                out[idx] = new_pose
        cover = max(cover, end)
    return out
