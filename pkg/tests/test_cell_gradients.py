"""Exhaustive finite-difference validation of every cell's backward pass."""

import numpy as np
import pytest

from poselab.cells import (
    ALL_KINDS,
    CellSpec,
    cell_backward,
    cell_forward,
    init_params,
)

EPS = 1e-6
REL_TOL = 1e-5
ABS_FLOOR = 1e-9


def check_entry(analytic, fd):
    if abs(analytic - fd) <= ABS_FLOOR:
        return True
    return abs(analytic - fd) / max(abs(analytic), abs(fd)) < REL_TOL


def fd_check(kind, seed, t_len=None, in_dim=None, units=None):
    rng = np.random.default_rng(seed)
    t_len = t_len or int(rng.integers(1, 6))
    in_dim = in_dim or int(rng.integers(1, 7))
    units = units or int(rng.integers(1, 7))
    spec = CellSpec(kind, in_dim, units)
    params = init_params(spec, rng)
    x = rng.normal(size=(t_len, in_dim))
    h0 = rng.normal(size=units) * 0.5
    c0 = rng.normal(size=units) * 0.5
    g_out = rng.normal(size=(t_len, units))

    def loss():
        hs, _, _ = cell_forward(spec, params, x, h0=h0, c0=c0)
        return float((g_out * hs).sum())

    hs, _, cache = cell_forward(spec, params, x, h0=h0, c0=c0)
    grads, dx, ds0 = cell_backward(spec, params, cache, g_out)

    failures = []

    def probe(arr, idx, analytic, label):
        orig = arr[idx]
        arr[idx] = orig + EPS
        lp = loss()
        arr[idx] = orig - EPS
        lm = loss()
        arr[idx] = orig
        fd = (lp - lm) / (2 * EPS)
        if not check_entry(analytic, fd):
            failures.append((label, idx, analytic, fd))

    for name, arr in params.items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            probe(arr, it.multi_index, grads[name][it.multi_index], name)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        probe(x, it.multi_index, dx[it.multi_index], "x")
    for j in range(units):
        probe(h0, (j,), ds0["h"][j], "h0")
    if ds0["c"] is not None:
        for j in range(units):
            probe(c0, (j,), ds0["c"][j], "c0")
    assert not failures, f"{kind.value}: {failures[:5]}"


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("seed", [0, 1])
def test_exhaustive_gradients(kind, seed):
    fd_check(kind, seed)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_long_sequence_gradients(kind):
    fd_check(kind, seed=7, t_len=5, in_dim=3, units=4)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_upstream_gives_zero_grads(kind):
    rng = np.random.default_rng(11)
    spec = CellSpec(kind, 3, 4)
    params = init_params(spec, rng)
    x = rng.normal(size=(4, 3))
    _, _, cache = cell_forward(spec, params, x)
    grads, dx, ds0 = cell_backward(spec, params, cache, np.zeros((4, 4)))
    for v in grads.values():
        np.testing.assert_array_equal(v, np.zeros_like(v))
    np.testing.assert_array_equal(dx, np.zeros_like(dx))
    np.testing.assert_array_equal(ds0["h"], np.zeros(4))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_batched_matches_unbatched(kind):
    rng = np.random.default_rng(5)
    spec = CellSpec(kind, 3, 4)
    params = init_params(spec, rng)
    xs = rng.normal(size=(5, 2, 3))
    g_out = rng.normal(size=(5, 2, 4))
    hs_b, _, cache_b = cell_forward(spec, params, xs)
    grads_b, dx_b, _ = cell_backward(spec, params, cache_b, g_out)
    accum = None
    for b in range(2):
        hs, _, cache = cell_forward(spec, params, xs[:, b, :])
        np.testing.assert_allclose(hs, hs_b[:, b, :], atol=1e-12)
        grads, dx, _ = cell_backward(spec, params, cache, g_out[:, b, :])
        np.testing.assert_allclose(dx, dx_b[:, b, :], atol=1e-12)
        if accum is None:
            accum = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                accum[k] += v
    for k in accum:
        np.testing.assert_allclose(accum[k], grads_b[k], atol=1e-10)
