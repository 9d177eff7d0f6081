"""Recurrent cell zoo with exact backpropagation through time.

Eight cell kinds share one functional interface: ``cell_forward`` runs the
recurrence and returns the hidden sequence plus a cache, ``cell_backward``
turns upstream hidden-state gradients into exact parameter/input gradients.
Everything is float64 so finite-difference checks are meaningful.

Recurrences (sigma = logistic, gates over [h_prev, x] unless noted):

  LSTM  i,f,g,o gates; c = f*c + i*g; h = o*tanh(c)
  GRU   z,r gates; h~ = tanh(Wx x + Wh (r*h) + b); h = (1-z)*h + z*h~
  MGU   single f gate; h~ = tanh(Wx x + Wh (f*h) + b); h = (1-f)*h + f*h~
  RAN   content c~ = Wc x; c = i*c~ + f*c; h = tanh(c)
  SRU   per-feature recurrence: f,r = sigma(W x + v*c + b);
        c = f*c + (1-f)*(W x); h = r*c + (1-r)*(Ws x)
  QRNN  width-2 causal conv gives z,f,o; c = f*c + (1-f)*z; h = o*c
  TRNN  gates on x only: z = Wz x + bz; f = sigma(Wf x + bf);
        h = f*h + (1-f)*z
  CFN   h = f*tanh(h) + i*tanh(W x)
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import DivergedError, ShapeError


class CellKind(str, Enum):
    LSTM = "lstm"
    GRU = "gru"
    MGU = "mgu"
    RAN = "ran"
    SRU = "sru"
    QRNN = "qrnn"
    TRNN = "trnn"
    CFN = "cfn"


ALL_KINDS = tuple(CellKind)


@dataclass(frozen=True)
class CellSpec:
    kind: CellKind
    input_dim: int
    units: int

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.units < 1:
            raise ValueError(f"units must be >= 1, got {self.units}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        # zero is allowed so no-op training runs stay expressible
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# parameter layouts: (name, kind_of_shape) with shapes resolved against the spec.
# 'x' = (input_dim, units), 'h' = (units, units), 'b' = (units,)
_LAYOUTS = {
    CellKind.LSTM: [("Wxi", "x"), ("Whi", "h"), ("bi", "b"),
                    ("Wxf", "x"), ("Whf", "h"), ("bf", "b"),
                    ("Wxg", "x"), ("Whg", "h"), ("bg", "b"),
                    ("Wxo", "x"), ("Who", "h"), ("bo", "b")],
    CellKind.GRU: [("Wxz", "x"), ("Whz", "h"), ("bz", "b"),
                   ("Wxr", "x"), ("Whr", "h"), ("br", "b"),
                   ("Wxh", "x"), ("Whh", "h"), ("bh", "b")],
    CellKind.MGU: [("Wxf", "x"), ("Whf", "h"), ("bf", "b"),
                   ("Wxh", "x"), ("Whh", "h"), ("bh", "b")],
    CellKind.RAN: [("Wxi", "x"), ("Whi", "h"), ("bi", "b"),
                   ("Wxf", "x"), ("Whf", "h"), ("bf", "b"),
                   ("Wc", "x")],
    CellKind.SRU: [("W", "x"), ("Ws", "x"),
                   ("Wf", "x"), ("vf", "b"), ("bf", "b"),
                   ("Wr", "x"), ("vr", "b"), ("br", "b")],
    CellKind.QRNN: [("Wz1", "x"), ("Wz2", "x"), ("bz", "b"),
                    ("Wf1", "x"), ("Wf2", "x"), ("bf", "b"),
                    ("Wo1", "x"), ("Wo2", "x"), ("bo", "b")],
    CellKind.TRNN: [("Wz", "x"), ("bz", "b"), ("Wf", "x"), ("bf", "b")],
    CellKind.CFN: [("Wxf", "x"), ("Whf", "h"), ("bf", "b"),
                   ("Wxi", "x"), ("Whi", "h"), ("bi", "b"),
                   ("W", "x")],
}

# forget-gate biases initialized to 1 (standard practice for LSTM/MGU)
_ONE_BIASES = {CellKind.LSTM: ("bf",), CellKind.MGU: ("bf",)}


def _shape_of(spec: CellSpec, code: str):
    if code == "x":
        return (spec.input_dim, spec.units)
    if code == "h":
        return (spec.units, spec.units)
    return (spec.units,)


def init_params(spec: CellSpec, rng: np.random.Generator) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for name, code in _LAYOUTS[spec.kind]:
        shape = _shape_of(spec, code)
        if code == "b":
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    for bias in _ONE_BIASES.get(spec.kind, ()):
        params[bias] = np.ones(spec.units)
    return params


def param_count(spec: CellSpec, stacked: bool = False) -> int:
    """Closed-form parameter count; equals the size of init_params output.

    A stacked network runs a first cell with units == input_dim (shape
    preserving) followed by a second cell with the configured unit count.
    """
    d, u = spec.input_dim, spec.units
    def single(d, u):
        counts = {
            CellKind.LSTM: 4 * (d * u + u * u + u),
            CellKind.GRU: 3 * (d * u + u * u + u),
            CellKind.MGU: 2 * (d * u + u * u + u),
            CellKind.RAN: 2 * (d * u + u * u + u) + d * u,
            CellKind.SRU: 4 * d * u + 4 * u,
            CellKind.QRNN: 6 * d * u + 3 * u,
            CellKind.TRNN: 2 * d * u + 2 * u,
            CellKind.CFN: 2 * (d * u + u * u + u) + d * u,
        }
        return counts[spec.kind]
    if stacked:
        return single(d, d) + single(d, u)
    return single(d, u)


def _check_input(spec: CellSpec, x_seq) -> tuple:
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim == 2:
        batched = False
        x = x[:, None, :]
    elif x.ndim == 3:
        batched = True
    else:
        raise ShapeError(f"x_seq must be (T, D) or (T, B, D), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("sequence length must be >= 1")
    if x.shape[2] != spec.input_dim:
        raise ShapeError(
            f"input dim {x.shape[2]} does not match spec input_dim {spec.input_dim}"
        )
    return x, batched


def _state(spec, batch, init, name):
    if init is None:
        return np.zeros((batch, spec.units))
    arr = np.asarray(init, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape != (batch, spec.units):
        raise ShapeError(f"{name} shape {arr.shape} != ({batch}, {spec.units})")
    return arr.copy()


# --- per-kind forward/backward -------------------------------------------------


def _fwd_lstm(p, x, h0, c0):
    wx = np.concatenate([p["Wxi"], p["Wxf"], p["Wxg"], p["Wxo"]], axis=1)
    wh = np.concatenate([p["Whi"], p["Whf"], p["Whg"], p["Who"]], axis=1)
    b = np.concatenate([p["bi"], p["bf"], p["bg"], p["bo"]])
    hs, cs, gs = kernels.lstm_forward(
        np.ascontiguousarray(x), np.ascontiguousarray(wx),
        np.ascontiguousarray(wh), np.ascontiguousarray(b), h0, c0
    )
    cache = {"x": x, "h0": h0, "c0": c0, "hs": hs, "cs": cs, "gs": gs,
             "wx": wx, "wh": wh}
    return hs, cs[-1], cache


def _bwd_lstm(p, cache, dhs):
    u = cache["h0"].shape[1]
    dx, dwx, dwh, db, dh0, dc0 = kernels.lstm_backward(
        np.ascontiguousarray(cache["x"]), cache["wx"], cache["wh"],
        cache["h0"], cache["c0"], cache["hs"], cache["cs"], cache["gs"],
        np.ascontiguousarray(dhs),
    )
    g = {}
    for i, gate in enumerate(("i", "f", "g", "o")):
        g["Wx" + gate] = dwx[:, i * u : (i + 1) * u]
        g["Wh" + gate] = dwh[:, i * u : (i + 1) * u]
        g["b" + gate] = db[i * u : (i + 1) * u]
    return g, dx, dh0, dc0


def _fwd_gru(p, x, h0, c0):
    t_len, batch, _ = x.shape
    u = h0.shape[1]
    hs = np.empty((t_len, batch, u))
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    hts = np.empty_like(hs)
    xz = x @ p["Wxz"]
    xr = x @ p["Wxr"]
    xh = x @ p["Wxh"]
    h = h0
    for t in range(t_len):
        z = _sigmoid(xz[t] + h @ p["Whz"] + p["bz"])
        r = _sigmoid(xr[t] + h @ p["Whr"] + p["br"])
        ht = np.tanh(xh[t] + (r * h) @ p["Whh"] + p["bh"])
        h = (1.0 - z) * h + z * ht
        zs[t], rs[t], hts[t], hs[t] = z, r, ht, h
    cache = {"x": x, "h0": h0, "hs": hs, "zs": zs, "rs": rs, "hts": hts}
    return hs, None, cache


def _bwd_gru(p, cache, dhs):
    x, h0, hs = cache["x"], cache["h0"], cache["hs"]
    zs, rs, hts = cache["zs"], cache["rs"], cache["hts"]
    t_len, batch, _ = x.shape
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dx = np.zeros_like(x)
    dh = np.zeros_like(h0)
    for t in range(t_len - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        z, r, ht = zs[t], rs[t], hts[t]
        dh = dh + dhs[t]
        dz = dh * (ht - h_prev)
        dht = dh * z
        dh_prev = dh * (1.0 - z)
        dah = dht * (1.0 - ht * ht)
        drh = dah @ p["Whh"].T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        g["Wxz"] += x[t].T @ daz
        g["Wxr"] += x[t].T @ dar
        g["Wxh"] += x[t].T @ dah
        g["Whz"] += h_prev.T @ daz
        g["Whr"] += h_prev.T @ dar
        g["Whh"] += (r * h_prev).T @ dah
        g["bz"] += daz.sum(axis=0)
        g["br"] += dar.sum(axis=0)
        g["bh"] += dah.sum(axis=0)
        dx[t] = daz @ p["Wxz"].T + dar @ p["Wxr"].T + dah @ p["Wxh"].T
        dh = dh_prev + daz @ p["Whz"].T + dar @ p["Whr"].T
    return g, dx, dh, None


def _fwd_mgu(p, x, h0, c0):
    t_len, batch, _ = x.shape
    u = h0.shape[1]
    hs = np.empty((t_len, batch, u))
    fs = np.empty_like(hs)
    hts = np.empty_like(hs)
    xf = x @ p["Wxf"]
    xh = x @ p["Wxh"]
    h = h0
    for t in range(t_len):
        f = _sigmoid(xf[t] + h @ p["Whf"] + p["bf"])
        ht = np.tanh(xh[t] + (f * h) @ p["Whh"] + p["bh"])
        h = (1.0 - f) * h + f * ht
        fs[t], hts[t], hs[t] = f, ht, h
    cache = {"x": x, "h0": h0, "hs": hs, "fs": fs, "hts": hts}
    return hs, None, cache


def _bwd_mgu(p, cache, dhs):
    x, h0, hs = cache["x"], cache["h0"], cache["hs"]
    fs, hts = cache["fs"], cache["hts"]
    t_len = x.shape[0]
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dx = np.zeros_like(x)
    dh = np.zeros_like(h0)
    for t in range(t_len - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        f, ht = fs[t], hts[t]
        dh = dh + dhs[t]
        df = dh * (ht - h_prev)
        dht = dh * f
        dh_prev = dh * (1.0 - f)
        dah = dht * (1.0 - ht * ht)
        dfh = dah @ p["Whh"].T
        df = df + dfh * h_prev
        dh_prev = dh_prev + dfh * f
        daf = df * f * (1.0 - f)
        g["Wxf"] += x[t].T @ daf
        g["Wxh"] += x[t].T @ dah
        g["Whf"] += h_prev.T @ daf
        g["Whh"] += (f * h_prev).T @ dah
        g["bf"] += daf.sum(axis=0)
        g["bh"] += dah.sum(axis=0)
        dx[t] = daf @ p["Wxf"].T + dah @ p["Wxh"].T
        dh = dh_prev + daf @ p["Whf"].T
    return g, dx, dh, None


def _fwd_ran(p, x, h0, c0):
    t_len, batch, _ = x.shape
    u = h0.shape[1]
    hs = np.empty((t_len, batch, u))
    cs = np.empty_like(hs)
    is_ = np.empty_like(hs)
    fs = np.empty_like(hs)
    cts = x @ p["Wc"]
    xi = x @ p["Wxi"]
    xf = x @ p["Wxf"]
    h = h0
    c = c0
    for t in range(t_len):
        i = _sigmoid(xi[t] + h @ p["Whi"] + p["bi"])
        f = _sigmoid(xf[t] + h @ p["Whf"] + p["bf"])
        c = i * cts[t] + f * c
        h = np.tanh(c)
        is_[t], fs[t], cs[t], hs[t] = i, f, c, h
    cache = {"x": x, "h0": h0, "c0": c0, "hs": hs, "cs": cs,
             "is": is_, "fs": fs, "cts": cts}
    return hs, cs[-1], cache


def _bwd_ran(p, cache, dhs):
    x, h0, c0 = cache["x"], cache["h0"], cache["c0"]
    hs, cs, is_, fs, cts = cache["hs"], cache["cs"], cache["is"], cache["fs"], cache["cts"]
    t_len = x.shape[0]
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dx = np.zeros_like(x)
    dh = np.zeros_like(h0)
    dc = np.zeros_like(c0)
    for t in range(t_len - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        c_prev = cs[t - 1] if t > 0 else c0
        i, f = is_[t], fs[t]
        dh = dh + dhs[t]
        dc = dc + dh * (1.0 - hs[t] * hs[t])
        di = dc * cts[t]
        dct = dc * i
        df = dc * c_prev
        dc = dc * f
        dai = di * i * (1.0 - i)
        daf = df * f * (1.0 - f)
        g["Wxi"] += x[t].T @ dai
        g["Wxf"] += x[t].T @ daf
        g["Wc"] += x[t].T @ dct
        g["Whi"] += h_prev.T @ dai
        g["Whf"] += h_prev.T @ daf
        g["bi"] += dai.sum(axis=0)
        g["bf"] += daf.sum(axis=0)
        dx[t] = dai @ p["Wxi"].T + daf @ p["Wxf"].T + dct @ p["Wc"].T
        dh = dai @ p["Whi"].T + daf @ p["Whf"].T
    return g, dx, dh, dc


def _fwd_sru(p, x, h0, c0):
    t_len, batch, _ = x.shape
    u = c0.shape[1]
    hs = np.empty((t_len, batch, u))
    cs = np.empty_like(hs)
    fs = np.empty_like(hs)
    rs = np.empty_like(hs)
    xt = x @ p["W"]
    xs = x @ p["Ws"]
    xf = x @ p["Wf"]
    xr = x @ p["Wr"]
    c = c0
    for t in range(t_len):
        f = _sigmoid(xf[t] + p["vf"] * c + p["bf"])
        r = _sigmoid(xr[t] + p["vr"] * c + p["br"])
        c_new = f * c + (1.0 - f) * xt[t]
        h = r * c_new + (1.0 - r) * xs[t]
        fs[t], rs[t], cs[t], hs[t] = f, r, c_new, h
        c = c_new
    cache = {"x": x, "c0": c0, "hs": hs, "cs": cs, "fs": fs, "rs": rs,
             "xt": xt, "xs": xs}
    return hs, cs[-1], cache


def _bwd_sru(p, cache, dhs):
    x, c0 = cache["x"], cache["c0"]
    cs, fs, rs, xt, xs = cache["cs"], cache["fs"], cache["rs"], cache["xt"], cache["xs"]
    t_len = x.shape[0]
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dxt = np.zeros_like(xt)
    dxs = np.zeros_like(xs)
    daf_all = np.zeros_like(fs)
    dar_all = np.zeros_like(rs)
    dc = np.zeros_like(c0)
    for t in range(t_len - 1, -1, -1):
        c_prev = cs[t - 1] if t > 0 else c0
        f, r = fs[t], rs[t]
        dh = dhs[t]
        dr = dh * (cs[t] - xs[t])
        dc = dc + dh * r
        dxs[t] = dh * (1.0 - r)
        dar = dr * r * (1.0 - r)
        df = dc * (c_prev - xt[t])
        dxt[t] = dc * (1.0 - f)
        daf = df * f * (1.0 - f)
        g["vf"] += (daf * c_prev).sum(axis=0)
        g["vr"] += (dar * c_prev).sum(axis=0)
        g["bf"] += daf.sum(axis=0)
        g["br"] += dar.sum(axis=0)
        daf_all[t] = daf
        dar_all[t] = dar
        dc = dc * f + daf * p["vf"] + dar * p["vr"]
    flat = lambda a: a.reshape(-1, a.shape[-1])
    g["W"] = flat(x).T @ flat(dxt)
    g["Ws"] = flat(x).T @ flat(dxs)
    g["Wf"] = flat(x).T @ flat(daf_all)
    g["Wr"] = flat(x).T @ flat(dar_all)
    dx = (dxt @ p["W"].T + dxs @ p["Ws"].T
          + daf_all @ p["Wf"].T + dar_all @ p["Wr"].T)
    return g, dx, np.zeros_like(dc), dc


def _shift_right(a):
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


def _fwd_qrnn(p, x, h0, c0):
    t_len, batch, _ = x.shape
    xp = _shift_right(x)
    az = xp @ p["Wz1"] + x @ p["Wz2"] + p["bz"]
    af = xp @ p["Wf1"] + x @ p["Wf2"] + p["bf"]
    ao = xp @ p["Wo1"] + x @ p["Wo2"] + p["bo"]
    z = np.tanh(az)
    f = _sigmoid(af)
    o = _sigmoid(ao)
    cs = np.empty_like(z)
    c = c0
    for t in range(t_len):
        c = f[t] * c + (1.0 - f[t]) * z[t]
        cs[t] = c
    hs = o * cs
    cache = {"x": x, "c0": c0, "cs": cs, "zs": z, "fs": f, "os": o, "hs": hs}
    return hs, cs[-1], cache


def _bwd_qrnn(p, cache, dhs):
    x, c0 = cache["x"], cache["c0"]
    cs, z, f, o = cache["cs"], cache["zs"], cache["fs"], cache["os"]
    t_len = x.shape[0]
    do = dhs * cs
    dc_steps = dhs * o
    dz = np.empty_like(z)
    df = np.empty_like(f)
    dc = np.zeros_like(c0)
    for t in range(t_len - 1, -1, -1):
        c_prev = cs[t - 1] if t > 0 else c0
        dc = dc + dc_steps[t]
        df[t] = dc * (c_prev - z[t])
        dz[t] = dc * (1.0 - f[t])
        dc = dc * f[t]
    daz = dz * (1.0 - z * z)
    daf = df * f * (1.0 - f)
    dao = do * o * (1.0 - o)
    xp = _shift_right(x)
    flat = lambda a: a.reshape(-1, a.shape[-1])
    g = {
        "Wz1": flat(xp).T @ flat(daz), "Wz2": flat(x).T @ flat(daz),
        "bz": flat(daz).sum(axis=0),
        "Wf1": flat(xp).T @ flat(daf), "Wf2": flat(x).T @ flat(daf),
        "bf": flat(daf).sum(axis=0),
        "Wo1": flat(xp).T @ flat(dao), "Wo2": flat(x).T @ flat(dao),
        "bo": flat(dao).sum(axis=0),
    }
    dx = daz @ p["Wz2"].T + daf @ p["Wf2"].T + dao @ p["Wo2"].T
    from_prev = daz @ p["Wz1"].T + daf @ p["Wf1"].T + dao @ p["Wo1"].T
    dx[:-1] += from_prev[1:]
    return g, dx, np.zeros((x.shape[1], f.shape[2])), dc


def _fwd_trnn(p, x, h0, c0):
    t_len, batch, _ = x.shape
    z = x @ p["Wz"] + p["bz"]
    f = _sigmoid(x @ p["Wf"] + p["bf"])
    hs = np.empty_like(z)
    h = h0
    for t in range(t_len):
        h = f[t] * h + (1.0 - f[t]) * z[t]
        hs[t] = h
    cache = {"x": x, "h0": h0, "hs": hs, "zs": z, "fs": f}
    return hs, None, cache


def _bwd_trnn(p, cache, dhs):
    x, h0, hs, z, f = cache["x"], cache["h0"], cache["hs"], cache["zs"], cache["fs"]
    t_len = x.shape[0]
    dz = np.empty_like(z)
    df = np.empty_like(f)
    dh = np.zeros_like(h0)
    for t in range(t_len - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        dh = dh + dhs[t]
        df[t] = dh * (h_prev - z[t])
        dz[t] = dh * (1.0 - f[t])
        dh = dh * f[t]
    daf = df * f * (1.0 - f)
    flat = lambda a: a.reshape(-1, a.shape[-1])
    g = {
        "Wz": flat(x).T @ flat(dz), "bz": flat(dz).sum(axis=0),
        "Wf": flat(x).T @ flat(daf), "bf": flat(daf).sum(axis=0),
    }
    dx = dz @ p["Wz"].T + daf @ p["Wf"].T
    return g, dx, dh, None


def _fwd_cfn(p, x, h0, c0):
    t_len, batch, _ = x.shape
    u = h0.shape[1]
    hs = np.empty((t_len, batch, u))
    fs = np.empty_like(hs)
    is_ = np.empty_like(hs)
    ws = np.tanh(x @ p["W"])
    xf = x @ p["Wxf"]
    xi = x @ p["Wxi"]
    h = h0
    for t in range(t_len):
        f = _sigmoid(xf[t] + h @ p["Whf"] + p["bf"])
        i = _sigmoid(xi[t] + h @ p["Whi"] + p["bi"])
        h = f * np.tanh(h) + i * ws[t]
        fs[t], is_[t], hs[t] = f, i, h
    cache = {"x": x, "h0": h0, "hs": hs, "fs": fs, "is": is_, "ws": ws}
    return hs, None, cache


def _bwd_cfn(p, cache, dhs):
    x, h0, hs = cache["x"], cache["h0"], cache["hs"]
    fs, is_, ws = cache["fs"], cache["is"], cache["ws"]
    t_len = x.shape[0]
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dx = np.zeros_like(x)
    dh = np.zeros_like(h0)
    for t in range(t_len - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        f, i, w = fs[t], is_[t], ws[t]
        th = np.tanh(h_prev)
        dh = dh + dhs[t]
        df = dh * th
        di = dh * w
        dw = dh * i
        dh_prev = dh * f * (1.0 - th * th)
        daf = df * f * (1.0 - f)
        dai = di * i * (1.0 - i)
        daw = dw * (1.0 - w * w)
        g["Wxf"] += x[t].T @ daf
        g["Wxi"] += x[t].T @ dai
        g["W"] += x[t].T @ daw
        g["Whf"] += h_prev.T @ daf
        g["Whi"] += h_prev.T @ dai
        g["bf"] += daf.sum(axis=0)
        g["bi"] += dai.sum(axis=0)
        dx[t] = daf @ p["Wxf"].T + dai @ p["Wxi"].T + daw @ p["W"].T
        dh = dh_prev + daf @ p["Whf"].T + dai @ p["Whi"].T
    return g, dx, dh, None


_FORWARD = {
    CellKind.LSTM: _fwd_lstm, CellKind.GRU: _fwd_gru, CellKind.MGU: _fwd_mgu,
    CellKind.RAN: _fwd_ran, CellKind.SRU: _fwd_sru, CellKind.QRNN: _fwd_qrnn,
    CellKind.TRNN: _fwd_trnn, CellKind.CFN: _fwd_cfn,
}
_BACKWARD = {
    CellKind.LSTM: _bwd_lstm, CellKind.GRU: _bwd_gru, CellKind.MGU: _bwd_mgu,
    CellKind.RAN: _bwd_ran, CellKind.SRU: _bwd_sru, CellKind.QRNN: _bwd_qrnn,
    CellKind.TRNN: _bwd_trnn, CellKind.CFN: _bwd_cfn,
}
# kinds whose extra recurrent state is a cell vector c
_HAS_CELL_STATE = (CellKind.LSTM, CellKind.RAN, CellKind.SRU, CellKind.QRNN)


def cell_forward(spec: CellSpec, params: dict, x_seq, h0=None, c0=None):
    """Run the recurrence; returns (h_seq, state, cache).

    state is {"h": final hidden, "c": final cell or None}; cache feeds
    cell_backward.  x_seq may be (T, input_dim) or (T, B, input_dim).
    """
    x, batched = _check_input(spec, x_seq)
    batch = x.shape[1]
    h0a = _state(spec, batch, h0, "h0")
    c0a = _state(spec, batch, c0, "c0")
    hs, c_fin, cache = _FORWARD[spec.kind](params, x, h0a, c0a)
    if not np.all(np.isfinite(hs[-1])):
        raise DivergedError(f"{spec.kind.value} produced non-finite activations")
    cache["spec"] = spec
    cache["batched"] = batched
    h_seq = hs if batched else hs[:, 0, :]
    state = {"h": hs[-1] if batched else hs[-1, 0],
             "c": (c_fin if batched else c_fin[0]) if c_fin is not None else None}
    return h_seq, state, cache


def cell_backward(spec: CellSpec, params: dict, cache: dict, grad_h_seq):
    """Exact BPTT gradients for a previous cell_forward.

    Returns (grad_params, grad_x_seq, grad_state0) where grad_state0 is
    {"h": ..., "c": ... or None}.
    """
    if cache.get("spec") != spec:
        raise ShapeError("cache does not belong to this cell spec")
    dhs = np.asarray(grad_h_seq, dtype=np.float64)
    if not cache["batched"]:
        dhs = dhs[:, None, :]
    want = (cache["x"].shape[0], cache["x"].shape[1], spec.units)
    if dhs.shape != want:
        raise ShapeError(f"grad_h_seq shape {dhs.shape} != {want}")
    g, dx, dh0, dc0 = _BACKWARD[spec.kind](params, cache, dhs)
    if not cache["batched"]:
        dx = dx[:, 0, :]
        dh0 = dh0[0]
        dc0 = dc0[0] if dc0 is not None else None
    return g, dx, {"h": dh0, "c": dc0}


def has_cell_state(kind: CellKind) -> bool:
    return kind in _HAS_CELL_STATE


# --- fully connected head -------------------------------------------------------


def affine_init(in_dim: int, out_dim: int, rng: np.random.Generator,
                bias=None) -> dict:
    bound = 1.0 / np.sqrt(in_dim)
    b = np.zeros(out_dim) if bias is None else np.asarray(bias, dtype=np.float64).copy()
    return {"W": rng.uniform(-bound, bound, size=(in_dim, out_dim)), "b": b}


def affine_forward(params: dict, x: np.ndarray) -> np.ndarray:
    return x @ params["W"] + params["b"]


def affine_backward(params: dict, x: np.ndarray, dy: np.ndarray):
    if x.ndim == 1:
        g = {"W": np.outer(x, dy), "b": dy.copy()}
        return g, dy @ params["W"].T
    g = {"W": x.T @ dy, "b": dy.sum(axis=0)}
    return g, dy @ params["W"].T


# --- Adam ------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_init(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, moments: dict, t: int,
              learning_rate: float) -> None:
    """Bias-corrected Adam update without weight decay; mutates params/moments.

    t is the 1-based step index.
    """
    for key in sorted(params.keys()):
        gr = grads[key]
        if not np.all(np.isfinite(gr)):
            raise DivergedError(f"non-finite gradient for {key!r}")
        m = moments["m"][key]
        v = moments["v"][key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * gr
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * gr * gr
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        params[key] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# --- copy memory task -------------------------------------------------------------


def copy_memory_batch(delay: int, n_symbols: int = 8, batch: int = 32,
                      seed: int = 0, prefix_len: int = 10):
    """Canonical copy task: prefix, blank delay, trigger, then recall.

    Symbols are 1..n_symbols, blank is 0, trigger is n_symbols + 1.
    Inputs:  [prefix, 0 x delay, trigger, 0 x prefix_len]
    Targets: [0 ... 0 (through the trigger), prefix]
    Returns integer arrays of shape (batch, 2 * prefix_len + delay + 1).
    """
    if delay < 1:
        raise ValueError(f"delay must be >= 1, got {delay}")
    rng = np.random.default_rng(seed)
    length = 2 * prefix_len + delay + 1
    prefix = rng.integers(1, n_symbols + 1, size=(batch, prefix_len))
    inputs = np.zeros((batch, length), dtype=np.int64)
    targets = np.zeros((batch, length), dtype=np.int64)
    inputs[:, :prefix_len] = prefix
    inputs[:, prefix_len + delay] = n_symbols + 1
    targets[:, prefix_len + delay + 1 :] = prefix
    return inputs, targets


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros(indices.shape + (depth,), dtype=np.float64)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out
