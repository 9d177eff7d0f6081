#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs the Lucas-Kanade level refinement and the LSTM sequence passes at
production-like sizes under both implementations and reports wall times
plus agreement.  The active backend for library calls is chosen by
POSELAB_BACKEND; this script imports both implementations directly.
"""

import time

import numpy as np

from poselab import _kernels_numpy as np_k

try:
    from poselab import _kernels_numba as nb_k
except ImportError:
    nb_k = None


def timeit(fn, *args, repeat=3):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def bench_lk():
    rng = np.random.default_rng(0)
    h, w = 480, 640
    base = rng.normal(size=(h + 8, w + 8))
    k = np.ones(5) / 5.0
    for axis in (0, 1):
        base = np.apply_along_axis(lambda m: np.convolve(m, k, mode="same"),
                                   axis, base)
    prev = base[:h, :w].copy()
    nxt = base[2:h + 2, :w].copy()
    lo, hi = prev.min(), prev.max()
    prev = (prev - lo) / (hi - lo)
    nxt = (nxt - lo) / (hi - lo)
    args = lambda: (prev, nxt, np.zeros((h, w)), np.zeros((h, w)), 15, 1e-4, 3)
    t_np, (u_np, v_np, _) = timeit(lambda: np_k.lk_refine_level(*args()))
    print(f"lk_refine_level 480x640  numpy: {t_np*1000:8.1f} ms")
    if nb_k is not None:
        nb_k.lk_refine_level(*args())  # compile
        t_nb, (u_nb, v_nb, _) = timeit(lambda: nb_k.lk_refine_level(*args()))
        diff = max(np.abs(u_np - u_nb).max(), np.abs(v_np - v_nb).max())
        print(f"lk_refine_level 480x640  numba: {t_nb*1000:8.1f} ms   "
              f"speedup {t_np/t_nb:5.2f}x   max diff {diff:.2e}")


def bench_lstm(batch: int = 50):
    rng = np.random.default_rng(1)
    t_len, in_dim, units = 120, 160, 50
    x = rng.normal(size=(t_len, batch, in_dim))
    wx = rng.normal(size=(in_dim, 4 * units)) * 0.05
    wh = rng.normal(size=(units, 4 * units)) * 0.05
    b = np.zeros(4 * units)
    h0 = np.zeros((batch, units))
    c0 = np.zeros((batch, units))
    d_hs = rng.normal(size=(t_len, batch, units))
    tag = f"lstm T{t_len} B{batch} u{units}"

    t_np, fwd_np = timeit(lambda: np_k.lstm_forward(x, wx, wh, b, h0, c0))
    t_np_b, bwd_np = timeit(
        lambda: np_k.lstm_backward(x, wx, wh, h0, c0, *fwd_np, d_hs))
    print(f"{tag} fwd  numpy: {t_np*1000:8.1f} ms")
    print(f"{tag} bwd  numpy: {t_np_b*1000:8.1f} ms")
    if nb_k is not None:
        nb_k.lstm_forward(x, wx, wh, b, h0, c0)  # compile
        t_nb, fwd_nb = timeit(lambda: nb_k.lstm_forward(x, wx, wh, b, h0, c0))
        nb_k.lstm_backward(x, wx, wh, h0, c0, *fwd_nb, d_hs)
        t_nb_b, bwd_nb = timeit(
            lambda: nb_k.lstm_backward(x, wx, wh, h0, c0, *fwd_nb, d_hs))
        d_f = max(np.abs(a - b).max() for a, b in zip(fwd_np, fwd_nb))
        d_b = max(np.abs(a - b).max() for a, b in zip(bwd_np, bwd_nb))
        print(f"{tag} fwd  numba: {t_nb*1000:8.1f} ms   "
              f"speedup {t_np/t_nb:5.2f}x   max diff {d_f:.2e}")
        print(f"{tag} bwd  numba: {t_nb_b*1000:8.1f} ms   "
              f"speedup {t_np_b/t_nb_b:5.2f}x   max diff {d_b:.2e}")


if __name__ == "__main__":
    if nb_k is None:
        print("numba unavailable; benchmarking the numpy fallback only")
    bench_lk()
    bench_lstm(batch=50)
    bench_lstm(batch=1)
