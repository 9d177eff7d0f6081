"""Recurrent fusion of absolute and relative pose streams.

Sliding windows concatenate the absolute pose (7) and the relative delta
arriving at the same timestep (7) into 14-wide feature rows.  One or two
stacked recurrent cells consume the window; two affine heads map the final
hidden state to a refined absolute pose for the window's last timestep.
In the stacked variant the first cell has exactly 14 units so its output
sequence keeps the input width.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import cells, checkpoint
from .cells import CellKind, CellSpec, TrainConfig
from .errors import DivergedError, ShapeError
from .geometry import (
    Pose,
    RelativePose,
    median_orientation_error,
    median_position_error,
)

FEATURE_WIDTH = 14
DEFAULT_BETA3 = 50.0
DEFAULT_BATCH = 100
SWEEP_N_T = (3, 6, 10, 15, 25)
SWEEP_R_U = (3, 5, 10)


@dataclass
class FusionConfig:
    cell: CellKind = CellKind.TRNN
    n_t: int = 15
    r_u: int = 10
    stacked: bool = True
    beta3: float = DEFAULT_BETA3
    batch_size: int = DEFAULT_BATCH

    def __post_init__(self):
        self.cell = CellKind(self.cell)
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if self.r_u < 1:
            raise ValueError("r_u must be >= 1")
        if self.beta3 <= 0:
            raise ValueError("beta3 must be positive")


@dataclass
class FusionWindow:
    features: np.ndarray  # (n_t, 14)
    target: Pose = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_WIDTH:
            raise ShapeError(
                f"window features must be (n_t, {FEATURE_WIDTH}), got {self.features.shape}"
            )


def pose_features(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.p, pose.q])


def build_windows(abs_stream: list, rel_stream: list, n_t: int,
                  targets: list = None) -> list:
    """Stride-1 sliding windows over the aligned streams.

    The relative entry of timestep t is the delta arriving at t; timestep 0
    uses the identity delta.  With targets (ground truth for training) the
    window's target is the pose at its last timestep.
    """
    n = len(abs_stream)
    if len(rel_stream) != max(0, n - 1):
        raise ShapeError(f"relative stream length {len(rel_stream)} != {n} - 1")
    if targets is not None and len(targets) != n:
        raise ShapeError("targets must align with the absolute stream")
    if n < n_t:
        raise ShapeError(f"stream length {n} shorter than window {n_t}")
    rel_feat = np.zeros((n, 7))
    rel_feat[0] = np.concatenate([RelativePose.identity().dp,
                                  RelativePose.identity().dq])
    for i, rel in enumerate(rel_stream):
        rel_feat[i + 1] = np.concatenate([rel.dp, rel.dq])
    abs_feat = np.stack([pose_features(p) for p in abs_stream])
    feats = np.concatenate([abs_feat, rel_feat], axis=1)
    out = []
    for start in range(0, n - n_t + 1):
        tgt = targets[start + n_t - 1] if targets is not None else None
        out.append(FusionWindow(feats[start : start + n_t].copy(), tgt))
    return out


@dataclass
class FusionNetwork:
    config: FusionConfig
    cell1: dict = None  # stacked only: 14 -> 14
    cell2: dict = None  # 14 -> r_u (single cell when not stacked)
    fc_p: dict = None
    fc_q: dict = None

    @property
    def spec1(self) -> CellSpec:
        return CellSpec(self.config.cell, FEATURE_WIDTH, FEATURE_WIDTH)

    @property
    def spec2(self) -> CellSpec:
        return CellSpec(self.config.cell, FEATURE_WIDTH, self.config.r_u)


def make_fusion_network(config: FusionConfig, seed: int = 0) -> FusionNetwork:
    rng = np.random.default_rng(seed)
    net = FusionNetwork(config)
    if config.stacked:
        net.cell1 = cells.init_params(net.spec1, rng)
    net.cell2 = cells.init_params(net.spec2, rng)
    net.fc_p = cells.affine_init(config.r_u, 3, rng)
    net.fc_q = cells.affine_init(config.r_u, 4, rng, bias=np.array([1.0, 0, 0, 0]))
    return net


def _forward_batch(net: FusionNetwork, x: np.ndarray):
    """x: (T, B, 14) -> (p (B,3), q_raw (B,4), cache)."""
    cache = {}
    if net.config.stacked:
        h1, _, c1 = cells.cell_forward(net.spec1, net.cell1, x)
        cache["c1"] = c1
        inner = h1
    else:
        inner = x
    h2, _, c2 = cells.cell_forward(net.spec2, net.cell2, inner)
    cache["c2"] = c2
    feat = h2[-1]
    cache["feat"] = feat
    p = cells.affine_forward(net.fc_p, feat)
    q = cells.affine_forward(net.fc_q, feat)
    return p, q, cache


def _backward_batch(net: FusionNetwork, cache, d_p, d_q):
    g_p, d_feat1 = cells.affine_backward(net.fc_p, cache["feat"], d_p)
    g_q, d_feat2 = cells.affine_backward(net.fc_q, cache["feat"], d_q)
    d_feat = d_feat1 + d_feat2
    t_len = cache["c2"]["x"].shape[0]
    batch = cache["c2"]["x"].shape[1]
    dh2 = np.zeros((t_len, batch, net.config.r_u))
    dh2[-1] = d_feat
    g2, dx2, _ = cells.cell_backward(net.spec2, net.cell2, cache["c2"], dh2)
    grads = {"cell2": g2, "fc_p": g_p, "fc_q": g_q}
    if net.config.stacked:
        g1, _, _ = cells.cell_backward(net.spec1, net.cell1, cache["c1"], dx2)
        grads["cell1"] = g1
    return grads


def fusion_forward(net: FusionNetwork, window):
    """(Pose, raw (p, q)) for one window; the pose quaternion is canonical."""
    feats = window.features if isinstance(window, FusionWindow) else np.asarray(window)
    if feats.shape != (net.config.n_t, FEATURE_WIDTH):
        raise ShapeError(
            f"window shape {feats.shape} != ({net.config.n_t}, {FEATURE_WIDTH})"
        )
    x = np.ascontiguousarray(feats[:, None, :])
    p, q, _ = _forward_batch(net, x)
    return Pose(p[0], q[0]), (p[0], q[0])


def fusion_loss(pred_p, pred_q, gt: Pose, beta3: float = DEFAULT_BETA3) -> float:
    """Squared position error plus beta3 x squared quaternion error; the
    ground-truth quaternion is normalized, the prediction enters raw."""
    if isinstance(gt, Pose):
        tp, tq = gt.p, gt.q
    else:
        arr = np.asarray(gt, dtype=np.float64)
        tp, tq = arr[:3], arr[3:]
    n = np.linalg.norm(tq)
    if n < 1e-12:
        raise ValueError("ground-truth quaternion has zero norm")
    tq = tq / n
    dp = np.asarray(pred_p) - tp
    dq = np.asarray(pred_q) - tq
    return float(dp @ dp + beta3 * (dq @ dq))


def _loss_and_grads(p, q, targets, beta3):
    b = p.shape[0]
    rp = p - targets[:, :3]
    rq = q - targets[:, 3:]
    loss = float(np.mean(np.sum(rp * rp, axis=1) + beta3 * np.sum(rq * rq, axis=1)))
    return loss, 2.0 * rp / b, 2.0 * beta3 * rq / b


def _gather_params(net: FusionNetwork) -> dict:
    flat = {}
    groups = [("cell2", net.cell2), ("fc_p", net.fc_p), ("fc_q", net.fc_q)]
    if net.config.stacked:
        groups.insert(0, ("cell1", net.cell1))
    for prefix, group in groups:
        for k, v in group.items():
            flat[f"{prefix}.{k}"] = v
    return flat


def _window_arrays(windows: list):
    feats = np.stack([w.features for w in windows])  # (N, n_t, 14)
    targets = []
    for w in windows:
        if w.target is None:
            raise ValueError("training windows need targets")
        t = w.target
        targets.append(np.concatenate([t.p, t.q / np.linalg.norm(t.q)]))
    return feats, np.stack(targets)


def train_fusion(config: FusionConfig, windows: list, train: TrainConfig,
                 net: FusionNetwork = None, stop_below: float = None):
    """Adam over the fusion loss; returns (net, loss trace)."""
    if not windows:
        raise ValueError("window set is empty")
    net = net or make_fusion_network(config, seed=train.seed)
    feats, targets = _window_arrays(windows)
    rng = np.random.default_rng(train.seed)
    flat = _gather_params(net)
    moments = cells.adam_init(flat)
    trace = []
    for it in range(train.iterations):
        idx = rng.integers(0, len(windows), size=min(config.batch_size, len(windows)))
        x = np.ascontiguousarray(feats[idx].transpose(1, 0, 2))
        p, q, cache = _forward_batch(net, x)
        loss, d_p, d_q = _loss_and_grads(p, q, targets[idx], config.beta3)
        if not np.isfinite(loss):
            raise DivergedError(f"fusion training diverged at iteration {it}")
        trace.append(loss)
        if stop_below is not None and loss < stop_below:
            break
        grads = _backward_batch(net, cache, d_p, d_q)
        flat_grads = {}
        for prefix, group in grads.items():
            for k, v in group.items():
                flat_grads[f"{prefix}.{k}"] = v
        if train.learning_rate > 0:
            cells.adam_step(flat, flat_grads, moments, it + 1, train.learning_rate)
    return net, trace


def predict_stream(net: FusionNetwork, abs_stream: list, rel_stream: list) -> list:
    """Refined absolute stream; the first n_t - 1 poses (no full window yet)
    pass the absolute input through unchanged."""
    n_t = net.config.n_t
    windows = build_windows(abs_stream, rel_stream, n_t)
    out = [abs_stream[i].copy() for i in range(min(n_t - 1, len(abs_stream)))]
    if windows:
        feats = np.stack([w.features for w in windows])
        x = np.ascontiguousarray(feats.transpose(1, 0, 2))
        p, q, _ = _forward_batch(net, x)
        for i in range(len(windows)):
            out.append(Pose(p[i], q[i]))
    return out


# --- persistence -------------------------------------------------------------------


def save_fusion(path, net: FusionNetwork) -> None:
    cfg = net.config
    meta = {
        "kind": "fusion", "cell": cfg.cell.value, "n_t": cfg.n_t,
        "r_u": cfg.r_u, "stacked": int(cfg.stacked), "beta3": cfg.beta3,
        "batch_size": cfg.batch_size,
    }
    checkpoint.save_checkpoint(path, meta, _gather_params(net))


def load_fusion(path) -> FusionNetwork:
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "fusion":
        raise ValueError("checkpoint does not hold a fusion network")
    config = FusionConfig(
        cell=CellKind(meta["cell"]), n_t=int(meta["n_t"]), r_u=int(meta["r_u"]),
        stacked=bool(int(meta["stacked"])), beta3=float(meta["beta3"]),
        batch_size=int(meta["batch_size"]),
    )
    net = make_fusion_network(config)
    for name, arr in tensors.items():
        prefix, key = name.split(".", 1)
        getattr(net, prefix)[key] = arr
    return net


# --- hyperparameter sweep -----------------------------------------------------------

SWEEP_HEADER = "cell,stacked,n_t,r_u,median_pos_m,median_ori_deg,rank"


def sweep_fusion(grid: list, train_windows_fn, eval_fn, train: TrainConfig) -> list:
    """Train every (cell, stacked, n_t, r_u) configuration and rank results.

    grid: [(cell kind, stacked, n_t, r_u, iterations)]; iterations may be
    None to use the shared TrainConfig value.  train_windows_fn(n_t) must
    return the training windows; eval_fn(net) must return (median position
    error, median orientation error) on held-out data.  Per-run failures
    are recorded, not raised.  Returns rows sorted by rank.
    """
    rows = []
    for cell, stacked, n_t, r_u, iters in grid:
        config = FusionConfig(cell=cell, n_t=n_t, r_u=r_u, stacked=stacked)
        tc = TrainConfig(
            learning_rate=train.learning_rate, batch_size=train.batch_size,
            iterations=train.iterations if iters is None else iters,
            seed=train.seed,
        )
        try:
            net, _ = train_fusion(config, train_windows_fn(n_t), tc)
            pos, ori = eval_fn(net)
            rows.append({
                "cell": config.cell.value, "stacked": stacked, "n_t": n_t,
                "r_u": r_u, "median_pos_m": pos, "median_ori_deg": ori,
                "failed": False,
            })
        except Exception as exc:  # per-run failures become report rows
            rows.append({
                "cell": CellKind(cell).value, "stacked": stacked, "n_t": n_t,
                "r_u": r_u, "median_pos_m": float("inf"),
                "median_ori_deg": float("inf"), "failed": True,
                "error": str(exc),
            })
    order = sorted(range(len(rows)), key=lambda i: rows[i]["median_pos_m"])
    for rank, i in enumerate(order, start=1):
        rows[i]["rank"] = rank
    return sorted(rows, key=lambda r: r["rank"])


def save_sweep_csv(path, rows: list) -> None:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(
            f"{r['cell']},{int(r['stacked'])},{r['n_t']},{r['r_u']},"
            f"{float(r['median_pos_m'])!r},{float(r['median_ori_deg'])!r},{r['rank']}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def default_sweep_grid(cells_list=None, stacking=(False, True),
                       n_t_values=SWEEP_N_T, r_u_values=SWEEP_R_U,
                       iterations=None) -> list:
    kinds = cells_list or list(CellKind)
    return [
        (kind, stacked, n_t, r_u, iterations)
        for kind in kinds
        for stacked in stacking
        for n_t in n_t_values
        for r_u in r_u_values
    ]
