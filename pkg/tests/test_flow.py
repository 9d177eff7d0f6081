import numpy as np
import pytest

from poselab import _kernels_numpy
from poselab.errors import ShapeError
from poselab.flow import (
    FlowField,
    Image,
    load_flow,
    load_pgm,
    lucas_kanade,
    mean_pool,
    save_flow,
    save_pgm,
)

try:
    from poselab import _kernels_numba
except ImportError:
    _kernels_numba = None


def smooth_texture(h, w, seed=0, octaves=12):
    """Band-limited random texture in [0, 1] built from seeded sinusoids."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(octaves):
        fx, fy = rng.uniform(0.05, 0.4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.5, 1.0) * np.sin(fx * xx + fy * yy + phase)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def shifted_pair(h, w, dx, dy, seed=0):
    """Image pair where the texture moves by (+dx, +dy) pixels."""
    m = 8
    assert max(abs(dx), abs(dy)) <= m
    big = smooth_texture(h + 2 * m, w + 2 * m, seed)
    prev = big[m : m + h, m : m + w]
    nxt = big[m - dy : m - dy + h, m - dx : m - dx + w]
    return Image(prev.copy()), Image(nxt.copy())


class TestLucasKanade:
    def test_zero_motion(self):
        img = Image(smooth_texture(96, 128, seed=3))
        f = lucas_kanade(img, Image(img.pixels.copy()), window=15, levels=3)
        assert np.all(f.u == 0.0)
        assert np.all(f.v == 0.0)

    def test_integer_shift_recovered(self):
        prev, nxt = shifted_pair(120, 160, 2, 0, seed=5)
        f = lucas_kanade(prev, nxt, window=15, levels=3)
        interior = (slice(20, -20), slice(20, -20))
        assert abs(f.u[interior].mean() - 2.0) < 0.2
        assert abs(f.v[interior].mean()) < 0.2

    def test_flat_image_low_confidence(self):
        flat = Image(np.full((64, 64), 0.5))
        f = lucas_kanade(flat, Image(np.full((64, 64), 0.5)), window=9, levels=2)
        assert not f.valid.any()
        assert np.all(f.u == 0.0) and np.all(f.v == 0.0)

    def test_flow_linearity(self):
        prev, nxt1 = shifted_pair(120, 160, 1, 1, seed=9)
        _, nxt2 = shifted_pair(120, 160, 2, 2, seed=9)
        f1 = lucas_kanade(prev, nxt1, window=15, levels=3)
        f2 = lucas_kanade(prev, nxt2, window=15, levels=3)
        interior = (slice(25, -25), slice(25, -25))
        assert abs((f2.u - f1.u)[interior].mean() - 1.0) < 0.3
        assert abs((f2.v - f1.v)[interior].mean() - 1.0) < 0.3

    def test_deterministic(self):
        prev, nxt = shifted_pair(60, 80, 1, 0, seed=2)
        f1 = lucas_kanade(prev, nxt, window=9, levels=2)
        f2 = lucas_kanade(prev, nxt, window=9, levels=2)
        np.testing.assert_array_equal(f1.u, f2.u)
        np.testing.assert_array_equal(f1.v, f2.v)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            lucas_kanade(Image(np.zeros((10, 10))), Image(np.zeros((10, 12))))

    def test_bad_window_and_levels(self):
        img = Image(smooth_texture(64, 64))
        with pytest.raises(ValueError):
            lucas_kanade(img, img, window=4)
        with pytest.raises(ValueError):
            lucas_kanade(img, img, window=1)
        with pytest.raises(ValueError):
            lucas_kanade(img, img, levels=0)
        with pytest.raises(ValueError):
            lucas_kanade(img, img, window=33, levels=5)

    @pytest.mark.skipif(_kernels_numba is None, reason="numba unavailable")
    def test_backends_agree(self):
        prev, nxt = shifted_pair(80, 100, 1, 1, seed=4)
        args = (prev.pixels, nxt.pixels)
        u0 = np.zeros((80, 100))
        v0 = np.zeros((80, 100))
        un, vn, mn = _kernels_numpy.lk_refine_level(
            args[0], args[1], u0.copy(), v0.copy(), 11, 1e-4, 3)
        ub, vb, mb = _kernels_numba.lk_refine_level(
            args[0], args[1], u0.copy(), v0.copy(), 11, 1e-4, 3)
        np.testing.assert_allclose(un, ub, atol=1e-8)
        np.testing.assert_allclose(vn, vb, atol=1e-8)
        np.testing.assert_array_equal(mn, mb)


class TestMeanPool:
    def test_paper_shape(self):
        f = FlowField(np.zeros((480, 640)), np.zeros((480, 640)))
        out = mean_pool(f, 4)
        assert (out.height, out.width) == (120, 160)

    def test_constant_preserved(self):
        f = FlowField(np.full((16, 16), 2.5), np.full((16, 16), -1.25))
        out = mean_pool(f, 4)
        assert np.all(out.u == 2.5) and np.all(out.v == -1.25)

    def test_block_sum_oracle(self):
        vals = np.arange(64, dtype=np.float64).reshape(8, 8)
        out = mean_pool(FlowField(vals, vals.copy()), 4)
        # oracle: scalar accumulation over each 4x4 block
        expected = np.zeros((2, 2))
        for by in range(2):
            for bx in range(2):
                s = 0.0
                for y in range(4):
                    for x in range(4):
                        s += vals[4 * by + y, 4 * bx + x]
                expected[by, bx] = s / 16.0
        np.testing.assert_allclose(out.u, expected, rtol=1e-15)
        np.testing.assert_allclose(out.u, [[13.5, 17.5], [45.5, 49.5]])

    def test_global_mean_preserved(self, rng):
        u = rng.normal(size=(48, 64))
        v = rng.normal(size=(48, 64))
        out = mean_pool(FlowField(u, v), 8)
        assert abs(out.u.mean() - u.mean()) < 1e-12
        assert abs(out.v.mean() - v.mean()) < 1e-12

    def test_non_divisible_raises(self):
        with pytest.raises(ShapeError):
            mean_pool(FlowField(np.zeros((10, 10)), np.zeros((10, 10))), 3)


class TestFiles:
    def test_flow_round_trip(self, rng, tmp_path):
        u = rng.normal(size=(24, 32)).astype(np.float32).astype(np.float64)
        v = rng.normal(size=(24, 32)).astype(np.float32).astype(np.float64)
        path = tmp_path / "f.flo"
        save_flow(path, FlowField(u, v))
        raw = path.read_bytes()
        assert raw[:4] == b"PFLW"
        assert int.from_bytes(raw[4:8], "little") == 32
        assert int.from_bytes(raw[8:12], "little") == 24
        loaded = load_flow(path)
        np.testing.assert_array_equal(loaded.u, u)
        np.testing.assert_array_equal(loaded.v, v)

    def test_pgm_round_trip(self, tmp_path):
        img = Image(smooth_texture(30, 40, seed=1))
        path = tmp_path / "img.pgm"
        save_pgm(path, img)
        assert path.read_bytes().startswith(b"P5\n40 30\n255\n")
        loaded = load_pgm(path)
        assert loaded.pixels.shape == (30, 40)
        assert np.abs(loaded.pixels - img.pixels).max() < 1.0 / 255.0 + 1e-9
