"""Relative pose regression from pooled optical flow.

The pooled field's u and v channels are unrolled row by row into two LSTM
encoders (one per direction); their final hidden states are concatenated
and fed to two purely affine heads predicting the translation delta (3)
and the rotation-delta quaternion (4).  The loss normalizes the target
quaternion only; the raw head output enters the loss unnormalized.
"""

from dataclasses import dataclass, field

import numpy as np

from . import cells, checkpoint
from .cells import CellKind, CellSpec, TrainConfig
from .errors import DivergedError, ShapeError
from .geometry import Pose, RelativePose, relative_pose

DEFAULT_ROWS = 120
DEFAULT_COLS = 160
DEFAULT_UNITS = 50
DEFAULT_BETA2 = 50.0


@dataclass
class RprLossWeights:
    beta2: float = DEFAULT_BETA2

    def __post_init__(self):
        if self.beta2 <= 0:
            raise ValueError("beta2 must be positive")


@dataclass
class RprNetwork:
    rows: int
    cols: int
    units: int
    lstm_u: dict
    lstm_v: dict
    fc_dp: dict
    fc_dq: dict

    @property
    def spec(self) -> CellSpec:
        return CellSpec(CellKind.LSTM, self.cols, self.units)


def make_rpr_network(rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS,
                     units: int = DEFAULT_UNITS, seed: int = 0) -> RprNetwork:
    """Fresh network; the rotation head's bias starts at the identity
    quaternion so an untrained network emits a valid pose."""
    rng = np.random.default_rng(seed)
    spec = CellSpec(CellKind.LSTM, cols, units)
    lstm_u = cells.init_params(spec, rng)
    lstm_v = cells.init_params(spec, rng)
    fc_dp = cells.affine_init(2 * units, 3, rng)
    fc_dq = cells.affine_init(2 * units, 4, rng, bias=np.array([1.0, 0, 0, 0]))
    return RprNetwork(rows, cols, units, lstm_u, lstm_v, fc_dp, fc_dq)


def _check_pooled(net: RprNetwork, pooled) -> np.ndarray:
    x = np.asarray(pooled, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (net.rows, net.cols, 2):
        raise ShapeError(
            f"pooled flow must be ({net.rows}, {net.cols}, 2), got {x.shape[1:]}"
        )
    return x, single


def _forward_batch(net: RprNetwork, batch: np.ndarray):
    """batch: (B, rows, cols, 2) -> (dp (B,3), dq_raw (B,4), cache)."""
    spec = net.spec
    xu = np.ascontiguousarray(batch[:, :, :, 0].transpose(1, 0, 2))  # (T, B, cols)
    xv = np.ascontiguousarray(batch[:, :, :, 1].transpose(1, 0, 2))
    hu, _, cache_u = cells.cell_forward(spec, net.lstm_u, xu)
    hv, _, cache_v = cells.cell_forward(spec, net.lstm_v, xv)
    feat = np.concatenate([hu[-1], hv[-1]], axis=1)  # (B, 2*units)
    dp = cells.affine_forward(net.fc_dp, feat)
    dq = cells.affine_forward(net.fc_dq, feat)
    cache = {"cache_u": cache_u, "cache_v": cache_v, "feat": feat,
             "hu_shape": hu.shape, "hv_shape": hv.shape}
    return dp, dq, cache


def _backward_batch(net: RprNetwork, cache, d_dp, d_dq):
    spec = net.spec
    g_dp, d_feat1 = cells.affine_backward(net.fc_dp, cache["feat"], d_dp)
    g_dq, d_feat2 = cells.affine_backward(net.fc_dq, cache["feat"], d_dq)
    d_feat = d_feat1 + d_feat2
    u = net.units
    dh_u = np.zeros(cache["hu_shape"])
    dh_v = np.zeros(cache["hv_shape"])
    dh_u[-1] = d_feat[:, :u]
    dh_v[-1] = d_feat[:, u:]
    g_u, _, _ = cells.cell_backward(spec, net.lstm_u, cache["cache_u"], dh_u)
    g_v, _, _ = cells.cell_backward(spec, net.lstm_v, cache["cache_v"], dh_v)
    return {"lstm_u": g_u, "lstm_v": g_v, "fc_dp": g_dp, "fc_dq": g_dq}


def rpr_forward(net: RprNetwork, pooled):
    """(RelativePose, raw (dp, dq)) for one pooled field.

    The RelativePose carries the canonicalized unit quaternion; the raw
    head outputs are what the training loss consumes.
    """
    x, _ = _check_pooled(net, pooled)
    dp, dq, _ = _forward_batch(net, x)
    return RelativePose(dp[0], dq[0]), (dp[0], dq[0])


def make_rpr_target(prev: Pose, cur: Pose) -> RelativePose:
    """Ground-truth label: delta expressed in the previous pose's frame."""
    return relative_pose(prev, cur)


def _as_target(gt) -> np.ndarray:
    if isinstance(gt, RelativePose):
        return np.concatenate([gt.dp, gt.dq])
    arr = np.asarray(gt, dtype=np.float64)
    if arr.shape != (7,):
        raise ShapeError("target must be a RelativePose or 7-vector")
    n = np.linalg.norm(arr[3:])
    if n < 1e-12:
        raise ValueError("target quaternion has zero norm")
    return np.concatenate([arr[:3], arr[3:] / n])


def rpr_loss(pred_dp, pred_dq, gt, weights: RprLossWeights = None) -> float:
    """Unsquared-norm pose delta loss with the target quaternion normalized."""
    weights = weights or RprLossWeights()
    t = _as_target(gt)
    dp_err = float(np.linalg.norm(np.asarray(pred_dp) - t[:3]))
    dq_err = float(np.linalg.norm(np.asarray(pred_dq) - t[3:]))
    return dp_err + weights.beta2 * dq_err


def _loss_and_grads(dp, dq, targets, beta2):
    """Mean loss over the batch plus gradients w.r.t. raw head outputs."""
    b = dp.shape[0]
    rp = dp - targets[:, :3]
    rq = dq - targets[:, 3:]
    np_ = np.linalg.norm(rp, axis=1)
    nq = np.linalg.norm(rq, axis=1)
    loss = float(np.mean(np_ + beta2 * nq))
    # unsquared norms: gradient is the unit residual, zero at the kink
    sp = np.where(np_ > 1e-12, np_, 1.0)
    sq = np.where(nq > 1e-12, nq, 1.0)
    d_dp = np.where(np_[:, None] > 1e-12, rp / sp[:, None], 0.0) / b
    d_dq = beta2 * np.where(nq[:, None] > 1e-12, rq / sq[:, None], 0.0) / b
    return loss, d_dp, d_dq


def _gather_params(net: RprNetwork) -> dict:
    flat = {}
    for prefix, group in (("lstm_u", net.lstm_u), ("lstm_v", net.lstm_v),
                          ("fc_dp", net.fc_dp), ("fc_dq", net.fc_dq)):
        for k, v in group.items():
            flat[f"{prefix}.{k}"] = v
    return flat


def train_rpr(net: RprNetwork, dataset: list, config: TrainConfig,
              weights: RprLossWeights = None, stop_below: float = None):
    """Adam over the pose-delta loss; returns (net, loss trace).

    dataset: [(pooled (rows, cols, 2), RelativePose or 7-vector target)].
    Deterministic for a fixed seed.  Non-finite loss aborts.  stop_below
    ends training early once the batch loss falls under the threshold.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    weights = weights or RprLossWeights()
    rng = np.random.default_rng(config.seed)
    fields = np.stack([np.asarray(d[0], dtype=np.float64) for d in dataset])
    targets = np.stack([_as_target(d[1]) for d in dataset])
    flat = _gather_params(net)
    moments = cells.adam_init(flat)
    trace = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=min(config.batch_size, len(dataset)))
        dp, dq, cache = _forward_batch(net, fields[idx])
        loss, d_dp, d_dq = _loss_and_grads(dp, dq, targets[idx], weights.beta2)
        if not np.isfinite(loss):
            raise DivergedError(f"training loss diverged at iteration {it}")
        trace.append(loss)
        if stop_below is not None and loss < stop_below:
            break
        grads = _backward_batch(net, cache, d_dp, d_dq)
        flat_grads = {}
        for prefix, group in grads.items():
            for k, v in group.items():
                flat_grads[f"{prefix}.{k}"] = v
        if config.learning_rate > 0:
            cells.adam_step(flat, flat_grads, moments, it + 1, config.learning_rate)
    return net, trace


def rpr_predict_stream(net: RprNetwork, pooled_fields) -> list:
    """RelativePose predictions for a sequence of pooled flow fields."""
    out = []
    for f in pooled_fields:
        rel, _ = rpr_forward(net, f)
        out.append(rel)
    return out


# --- persistence -----------------------------------------------------------------


def save_rpr(path, net: RprNetwork) -> None:
    meta = {"kind": "rpr", "rows": net.rows, "cols": net.cols, "units": net.units}
    checkpoint.save_checkpoint(path, meta, _gather_params(net))


def load_rpr(path) -> RprNetwork:
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "rpr":
        raise ValueError("checkpoint does not hold a relative pose regressor")
    net = make_rpr_network(int(meta["rows"]), int(meta["cols"]), int(meta["units"]))
    for name, arr in tensors.items():
        prefix, key = name.split(".", 1)
        getattr(net, prefix)[key] = arr
    return net


MANIFEST_HEADER = "flow_file,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z"


def save_manifest(path, rows: list) -> None:
    """rows: [(flow filename, RelativePose target)]."""
    lines = [MANIFEST_HEADER]
    for fname, rel in rows:
        vals = ",".join(repr(float(v)) for v in np.concatenate([rel.dp, rel.dq]))
        lines.append(f"{fname},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            vals = [float(v) for v in parts[1:]]
            out.append((parts[0], RelativePose(np.array(vals[:3]), np.array(vals[3:]))))
    return out
