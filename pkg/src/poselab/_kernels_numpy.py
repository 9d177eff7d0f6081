"""Pure-numpy fallback implementations of the hot kernels.

Vectorized with integral-image box sums and batched matmuls; used when
POSELAB_BACKEND=numpy or numba is unavailable.  Same arithmetic as the
numba kernels up to float summation order.
"""

import numpy as np


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def warp_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample img at (x + u, y + v) with bilinear weights, clamped at borders."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.clip(xx + u, 0.0, w - 1.0)
    sy = np.clip(yy + v, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = sx - x0
    ay = sy - y0
    top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
    return top * (1.0 - ay) + bot * ay


def _box_sum(img: np.ndarray, r: int) -> np.ndarray:
    """Sum over (2r+1)^2 windows; output covers centers [r, H-r) x [r, W-r)."""
    h, w = img.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(img, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    k = 2 * r + 1
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def lk_refine_level(prev, nxt, u, v, window, tau, iters):
    """Iterative Lucas-Kanade refinement at one pyramid level.

    Returns (u, v, valid); valid is False where the structure tensor's
    smallest eigenvalue over the window falls below tau (flow forced to the
    incoming estimate there).  Border pixels where the window leaves the
    image replicate the nearest solved pixel.
    """
    h, w = prev.shape
    r = window // 2
    m = r + 1  # margin: window plus the central-difference stencil
    ix = np.zeros_like(prev)
    iy = np.zeros_like(prev)
    ix[:, 1:-1] = 0.5 * (prev[:, 2:] - prev[:, :-2])
    iy[1:-1, :] = 0.5 * (prev[2:, :] - prev[:-2, :])
    a11 = _box_sum(ix * ix, r)
    a12 = _box_sum(ix * iy, r)
    a22 = _box_sum(iy * iy, r)
    tr = a11 + a22
    det = a11 * a22 - a12 * a12
    lam = 0.5 * (tr - np.sqrt((a11 - a22) ** 2 + 4.0 * a12 * a12))
    ok = (lam >= tau) & (det > 1e-12)
    det_safe = np.where(ok, det, 1.0)
    sl = slice(1, -1)  # trim box-sum grid from margin r to margin m
    for _ in range(iters):
        warped = warp_bilinear(nxt, u, v)
        it = warped - prev
        b1 = _box_sum(ix * it, r)
        b2 = _box_sum(iy * it, r)
        du = np.where(ok, (a12 * b2 - a22 * b1) / det_safe, 0.0)
        dv = np.where(ok, (a12 * b1 - a11 * b2) / det_safe, 0.0)
        u[m : h - m, m : w - m] += du[sl, sl]
        v[m : h - m, m : w - m] += dv[sl, sl]
    valid = np.zeros((h, w), dtype=np.bool_)
    valid[m : h - m, m : w - m] = ok[sl, sl]
    u[:] = np.pad(u[m : h - m, m : w - m], m, mode="edge")
    v[:] = np.pad(v[m : h - m, m : w - m], m, mode="edge")
    valid[:] = np.pad(valid[m : h - m, m : w - m], m, mode="edge")
    return u, v, valid


def lstm_forward(x, wx, wh, b, h0, c0):
    """LSTM over a (T, B, in) sequence with fused gate weights.

    Gate order along the last axis of wx/wh/b is (i, f, g, o).
    Returns (H, C, G): hidden states, cell states, post-activation gates.
    """
    t_len, batch, _ = x.shape
    units = h0.shape[1]
    xw = (x.reshape(t_len * batch, -1) @ wx).reshape(t_len, batch, 4 * units)
    hs = np.empty((t_len, batch, units))
    cs = np.empty((t_len, batch, units))
    gs = np.empty((t_len, batch, 4 * units))
    h = h0
    c = c0
    for t in range(t_len):
        a = xw[t] + h @ wh + b
        i = _sigmoid(a[:, :units])
        f = _sigmoid(a[:, units : 2 * units])
        g = np.tanh(a[:, 2 * units : 3 * units])
        o = _sigmoid(a[:, 3 * units :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gs[t, :, :units] = i
        gs[t, :, units : 2 * units] = f
        gs[t, :, 2 * units : 3 * units] = g
        gs[t, :, 3 * units :] = o
        cs[t] = c
        hs[t] = h
    return hs, cs, gs


def lstm_backward(x, wx, wh, h0, c0, hs, cs, gs, d_hs):
    """Exact BPTT for lstm_forward; d_hs holds per-step upstream gradients.

    Returns (dx, dwx, dwh, db, dh0, dc0).
    """
    t_len, batch, in_dim = x.shape
    units = h0.shape[1]
    d_gates = np.empty((t_len, batch, 4 * units))
    dh = np.zeros((batch, units))
    dc = np.zeros((batch, units))
    for t in range(t_len - 1, -1, -1):
        c_prev = cs[t - 1] if t > 0 else c0
        i = gs[t, :, :units]
        f = gs[t, :, units : 2 * units]
        g = gs[t, :, 2 * units : 3 * units]
        o = gs[t, :, 3 * units :]
        tc = np.tanh(cs[t])
        dh = dh + d_hs[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc = dc * f
        d_gates[t, :, :units] = di * i * (1.0 - i)
        d_gates[t, :, units : 2 * units] = df * f * (1.0 - f)
        d_gates[t, :, 2 * units : 3 * units] = dg * (1.0 - g * g)
        d_gates[t, :, 3 * units :] = do * o * (1.0 - o)
        dh = d_gates[t] @ wh.T
    h_prev = np.concatenate([h0[None], hs[:-1]], axis=0)
    flat_g = d_gates.reshape(t_len * batch, 4 * units)
    dwx = x.reshape(t_len * batch, in_dim).T @ flat_g
    dwh = h_prev.reshape(t_len * batch, units).T @ flat_g
    db = flat_g.sum(axis=0)
    dx = (flat_g @ wx.T).reshape(t_len, batch, in_dim)
    return dx, dwx, dwh, db, dh, dc
