"""Numba @njit implementations of the hot kernels.

Scalar loops compiled with cache=True; no parallel=True and no fastmath so
each call is deterministic and independent of thread count.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def warp_bilinear(img, u, v):
    h, w = img.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            sx = x + u[y, x]
            sy = y + v[y, x]
            if sx < 0.0:
                sx = 0.0
            elif sx > w - 1.0:
                sx = w - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1.0:
                sy = h - 1.0
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            ax = sx - x0
            ay = sy - y0
            top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
            bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
            out[y, x] = top * (1.0 - ay) + bot * ay
    return out


@njit(cache=True)
def _box_sum(img, r):
    h, w = img.shape
    k = 2 * r + 1
    row = np.zeros((h, w - k + 1))
    for y in range(h):
        s = 0.0
        for x in range(k):
            s += img[y, x]
        row[y, 0] = s
        for x in range(1, w - k + 1):
            s += img[y, x + k - 1] - img[y, x - 1]
            row[y, x] = s
    out = np.zeros((h - k + 1, w - k + 1))
    for x in range(w - k + 1):
        s = 0.0
        for y in range(k):
            s += row[y, x]
        out[0, x] = s
        for y in range(1, h - k + 1):
            s += row[y + k - 1, x] - row[y - 1, x]
            out[y, x] = s
    return out


@njit(cache=True)
def lk_refine_level(prev, nxt, u, v, window, tau, iters):
    h, w = prev.shape
    r = window // 2
    m = r + 1
    ix = np.zeros((h, w))
    iy = np.zeros((h, w))
    for y in range(h):
        for x in range(1, w - 1):
            ix[y, x] = 0.5 * (prev[y, x + 1] - prev[y, x - 1])
    for y in range(1, h - 1):
        for x in range(w):
            iy[y, x] = 0.5 * (prev[y + 1, x] - prev[y - 1, x])
    a11 = _box_sum(ix * ix, r)
    a12 = _box_sum(ix * iy, r)
    a22 = _box_sum(iy * iy, r)
    ok = np.zeros(a11.shape, dtype=np.bool_)
    for y in range(a11.shape[0]):
        for x in range(a11.shape[1]):
            tr = a11[y, x] + a22[y, x]
            det = a11[y, x] * a22[y, x] - a12[y, x] * a12[y, x]
            dd = a11[y, x] - a22[y, x]
            lam = 0.5 * (tr - np.sqrt(dd * dd + 4.0 * a12[y, x] * a12[y, x]))
            ok[y, x] = lam >= tau and det > 1e-12
    for _ in range(iters):
        warped = warp_bilinear(nxt, u, v)
        it = warped - prev
        b1 = _box_sum(ix * it, r)
        b2 = _box_sum(iy * it, r)
        for y in range(m, h - m):
            for x in range(m, w - m):
                gy = y - r
                gx = x - r
                if ok[gy, gx]:
                    det = a11[gy, gx] * a22[gy, gx] - a12[gy, gx] * a12[gy, gx]
                    u[y, x] += (a12[gy, gx] * b2[gy, gx] - a22[gy, gx] * b1[gy, gx]) / det
                    v[y, x] += (a12[gy, gx] * b1[gy, gx] - a11[gy, gx] * b2[gy, gx]) / det
    valid = np.zeros((h, w), dtype=np.bool_)
    for y in range(m, h - m):
        for x in range(m, w - m):
            valid[y, x] = ok[y - r, x - r]
    # replicate nearest solved pixel into the border band
    for y in range(h):
        cy = min(max(y, m), h - m - 1)
        for x in range(w):
            cx = min(max(x, m), w - m - 1)
            if y != cy or x != cx:
                u[y, x] = u[cy, cx]
                v[y, x] = v[cy, cx]
                valid[y, x] = valid[cy, cx]
    return u, v, valid


@njit(cache=True)
def _sigmoid_inplace(a):
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            a[i, j] = 1.0 / (1.0 + np.exp(-a[i, j]))


@njit(cache=True)
def lstm_forward(x, wx, wh, b, h0, c0):
    t_len, batch, in_dim = x.shape
    units = h0.shape[1]
    hs = np.empty((t_len, batch, units))
    cs = np.empty((t_len, batch, units))
    gs = np.empty((t_len, batch, 4 * units))
    xw = np.dot(np.ascontiguousarray(x).reshape(t_len * batch, in_dim), wx)
    h = h0.copy()
    c = c0.copy()
    for t in range(t_len):
        a = np.dot(h, wh)
        for bi in range(batch):
            base = (t * batch + bi)
            for j in range(4 * units):
                a[bi, j] += xw[base, j] + b[j]
        for bi in range(batch):
            for j in range(units):
                gi = 1.0 / (1.0 + np.exp(-a[bi, j]))
                gf = 1.0 / (1.0 + np.exp(-a[bi, units + j]))
                gg = np.tanh(a[bi, 2 * units + j])
                go = 1.0 / (1.0 + np.exp(-a[bi, 3 * units + j]))
                cv = gf * c[bi, j] + gi * gg
                hv = go * np.tanh(cv)
                c[bi, j] = cv
                h[bi, j] = hv
                gs[t, bi, j] = gi
                gs[t, bi, units + j] = gf
                gs[t, bi, 2 * units + j] = gg
                gs[t, bi, 3 * units + j] = go
                cs[t, bi, j] = cv
                hs[t, bi, j] = hv
    return hs, cs, gs


@njit(cache=True)
def lstm_backward(x, wx, wh, h0, c0, hs, cs, gs, d_hs):
    t_len, batch, in_dim = x.shape
    units = h0.shape[1]
    d_gates = np.empty((t_len, batch, 4 * units))
    dh = np.zeros((batch, units))
    dc = np.zeros((batch, units))
    wh_t = np.ascontiguousarray(wh.T)
    for t in range(t_len - 1, -1, -1):
        for bi in range(batch):
            for j in range(units):
                c_prev = cs[t - 1, bi, j] if t > 0 else c0[bi, j]
                gi = gs[t, bi, j]
                gf = gs[t, bi, units + j]
                gg = gs[t, bi, 2 * units + j]
                go = gs[t, bi, 3 * units + j]
                tc = np.tanh(cs[t, bi, j])
                dhv = dh[bi, j] + d_hs[t, bi, j]
                dov = dhv * tc
                dcv = dc[bi, j] + dhv * go * (1.0 - tc * tc)
                div = dcv * gg
                dfv = dcv * c_prev
                dgv = dcv * gi
                dc[bi, j] = dcv * gf
                d_gates[t, bi, j] = div * gi * (1.0 - gi)
                d_gates[t, bi, units + j] = dfv * gf * (1.0 - gf)
                d_gates[t, bi, 2 * units + j] = dgv * (1.0 - gg * gg)
                d_gates[t, bi, 3 * units + j] = dov * go * (1.0 - go)
        dh = np.dot(d_gates[t], wh_t)
    flat_g = np.ascontiguousarray(d_gates).reshape(t_len * batch, 4 * units)
    x_flat = np.ascontiguousarray(x).reshape(t_len * batch, in_dim)
    h_prev = np.empty((t_len, batch, units))
    for bi in range(batch):
        for j in range(units):
            h_prev[0, bi, j] = h0[bi, j]
    for t in range(1, t_len):
        for bi in range(batch):
            for j in range(units):
                h_prev[t, bi, j] = hs[t - 1, bi, j]
    hp_flat = np.ascontiguousarray(h_prev).reshape(t_len * batch, units)
    dwx = np.dot(x_flat.T, flat_g)
    dwh = np.dot(hp_flat.T, flat_g)
    db = np.zeros(4 * units)
    for n in range(t_len * batch):
        for j in range(4 * units):
            db[j] += flat_g[n, j]
    dx = np.dot(flat_g, wx.T).reshape(t_len, batch, in_dim)
    return dx, dwx, dwh, db, dh, dc
