import math

import numpy as np
import pytest

from poselab import checkpoint
from poselab.cells import (
    ALL_KINDS,
    CellKind,
    CellSpec,
    TrainConfig,
    adam_init,
    adam_step,
    affine_backward,
    affine_forward,
    affine_init,
    cell_backward,
    cell_forward,
    copy_memory_batch,
    init_params,
    one_hot,
    param_count,
)
from poselab.errors import DivergedError, ShapeError


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


class TestForwardBasics:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_zero_weights_zero_input_fixed_point(self, kind):
        spec = CellSpec(kind, 3, 4)
        params = {k: np.zeros_like(v) for k, v in
                  init_params(spec, np.random.default_rng(0)).items()}
        x = np.zeros((6, 3))
        hs, state, _ = cell_forward(spec, params, x)
        np.testing.assert_array_equal(hs, np.zeros((6, 4)))

    def test_lstm_saturated_forget_holds_state(self):
        spec = CellSpec(CellKind.LSTM, 2, 3)
        params = {k: np.zeros_like(v) for k, v in
                  init_params(spec, np.random.default_rng(0)).items()}
        params["bf"] = np.full(3, 40.0)   # forget ~ 1
        params["bi"] = np.full(3, -40.0)  # input ~ 0
        x = np.random.default_rng(1).normal(size=(10, 2))
        c0 = np.array([0.3, -0.7, 1.1])
        hs, state, _ = cell_forward(spec, params, x, c0=c0)
        ref = 0.5 * np.tanh(c0)  # o = sigmoid(0) = 0.5
        for t in range(10):
            np.testing.assert_allclose(hs[t], ref, atol=1e-12)

    def test_shape_mismatch_raises(self):
        spec = CellSpec(CellKind.GRU, 3, 4)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            cell_forward(spec, params, np.zeros((5, 7)))

    def test_divergence_detected(self):
        spec = CellSpec(CellKind.TRNN, 2, 2)
        params = init_params(spec, np.random.default_rng(0))
        params["Wz"] = np.full((2, 2), np.nan)
        with pytest.raises(DivergedError):
            cell_forward(spec, params, np.ones((3, 2)))


class TestHandEvaluatedRecurrences:
    """T = 1, scalar dims: outputs must match the written gate formulas."""

    def setup_method(self):
        self.x = 0.7
        self.h0 = np.array([0.4])
        self.c0 = np.array([-0.3])

    def run_cell(self, kind, params):
        spec = CellSpec(kind, 1, 1)
        hs, _, _ = cell_forward(spec, params, np.array([[self.x]]),
                                h0=self.h0, c0=self.c0)
        return float(hs[0, 0])

    def test_lstm(self):
        w = dict(Wxi=0.3, Whi=-0.2, bi=0.1, Wxf=0.5, Whf=0.4, bf=0.2,
                 Wxg=-0.6, Whg=0.3, bg=0.0, Wxo=0.2, Who=0.1, bo=-0.1)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        i = sigmoid(0.3 * self.x + -0.2 * 0.4 + 0.1)
        f = sigmoid(0.5 * self.x + 0.4 * 0.4 + 0.2)
        g = math.tanh(-0.6 * self.x + 0.3 * 0.4)
        o = sigmoid(0.2 * self.x + 0.1 * 0.4 - 0.1)
        c = f * -0.3 + i * g
        expected = o * math.tanh(c)
        assert self.run_cell(CellKind.LSTM, params) == pytest.approx(expected, abs=1e-14)

    def test_gru(self):
        w = dict(Wxz=0.3, Whz=0.2, bz=-0.1, Wxr=-0.4, Whr=0.5, br=0.0,
                 Wxh=0.6, Whh=-0.3, bh=0.1)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        z = sigmoid(0.3 * self.x + 0.2 * 0.4 - 0.1)
        r = sigmoid(-0.4 * self.x + 0.5 * 0.4)
        ht = math.tanh(0.6 * self.x + -0.3 * (r * 0.4) + 0.1)
        expected = (1 - z) * 0.4 + z * ht
        assert self.run_cell(CellKind.GRU, params) == pytest.approx(expected, abs=1e-14)

    def test_mgu(self):
        w = dict(Wxf=0.25, Whf=-0.5, bf=0.3, Wxh=0.7, Whh=0.2, bh=-0.2)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        f = sigmoid(0.25 * self.x + -0.5 * 0.4 + 0.3)
        ht = math.tanh(0.7 * self.x + 0.2 * (f * 0.4) - 0.2)
        expected = (1 - f) * 0.4 + f * ht
        assert self.run_cell(CellKind.MGU, params) == pytest.approx(expected, abs=1e-14)

    def test_ran(self):
        w = dict(Wxi=0.3, Whi=0.1, bi=0.0, Wxf=-0.2, Whf=0.4, bf=0.1, Wc=0.9)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        i = sigmoid(0.3 * self.x + 0.1 * 0.4)
        f = sigmoid(-0.2 * self.x + 0.4 * 0.4 + 0.1)
        c = i * (0.9 * self.x) + f * -0.3
        expected = math.tanh(c)
        assert self.run_cell(CellKind.RAN, params) == pytest.approx(expected, abs=1e-14)

    def test_sru(self):
        w = dict(W=0.8, Ws=0.5, Wf=0.3, vf=0.2, bf=-0.1, Wr=-0.4, vr=0.6, br=0.2)
        params = {k: np.full((1, 1) if k in ("W", "Ws", "Wf", "Wr") else (1,), v)
                  for k, v in w.items()}
        xt = 0.8 * self.x
        xs = 0.5 * self.x
        f = sigmoid(0.3 * self.x + 0.2 * -0.3 - 0.1)
        r = sigmoid(-0.4 * self.x + 0.6 * -0.3 + 0.2)
        c = f * -0.3 + (1 - f) * xt
        expected = r * c + (1 - r) * xs
        assert self.run_cell(CellKind.SRU, params) == pytest.approx(expected, abs=1e-14)

    def test_qrnn(self):
        w = dict(Wz1=0.2, Wz2=0.5, bz=0.1, Wf1=-0.3, Wf2=0.4, bf=0.0,
                 Wo1=0.6, Wo2=-0.2, bo=0.3)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        # t = 0 uses a zero-padded previous input
        z = math.tanh(0.5 * self.x + 0.1)
        f = sigmoid(0.4 * self.x)
        o = sigmoid(-0.2 * self.x + 0.3)
        c = f * -0.3 + (1 - f) * z
        expected = o * c
        assert self.run_cell(CellKind.QRNN, params) == pytest.approx(expected, abs=1e-14)

    def test_trnn(self):
        w = dict(Wz=0.9, bz=-0.2, Wf=0.3, bf=0.1)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        z = 0.9 * self.x - 0.2
        f = sigmoid(0.3 * self.x + 0.1)
        expected = f * 0.4 + (1 - f) * z
        assert self.run_cell(CellKind.TRNN, params) == pytest.approx(expected, abs=1e-14)

    def test_cfn(self):
        w = dict(Wxf=0.4, Whf=-0.1, bf=0.2, Wxi=0.3, Whi=0.5, bi=-0.3, W=0.7)
        params = {k: np.full((1, 1) if k.startswith("W") else (1,), v)
                  for k, v in w.items()}
        f = sigmoid(0.4 * self.x + -0.1 * 0.4 + 0.2)
        i = sigmoid(0.3 * self.x + 0.5 * 0.4 - 0.3)
        expected = f * math.tanh(0.4) + i * math.tanh(0.7 * self.x)
        assert self.run_cell(CellKind.CFN, params) == pytest.approx(expected, abs=1e-14)


class TestParamCount:
    def test_lstm_paper_example(self):
        assert param_count(CellSpec(CellKind.LSTM, 14, 10)) == 1000

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("stacked", [False, True])
    def test_matches_enumeration(self, kind, stacked):
        spec = CellSpec(kind, 5, 3)
        rng = np.random.default_rng(0)
        total = sum(v.size for v in init_params(spec, rng).values())
        if stacked:
            total += sum(v.size for v in
                         init_params(CellSpec(kind, 5, 5), rng).values())
        assert param_count(spec, stacked=stacked) == total

    def test_gate_count_ordering(self):
        for d, u in [(14, 10), (3, 7), (20, 4), (1, 1)]:
            counts = {k: param_count(CellSpec(k, d, u)) for k in ALL_KINDS}
            assert counts[CellKind.LSTM] > counts[CellKind.GRU] > counts[CellKind.MGU]
            assert counts[CellKind.TRNN] == min(counts.values())

    def test_rejects_zero_units(self):
        with pytest.raises(ValueError):
            CellSpec(CellKind.LSTM, 3, 0)


class TestAdam:
    def test_zero_grads_fresh_moments(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.zeros(2)}
        moments = adam_init(params)
        adam_step(params, grads, moments, 1, 0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_moments_decay(self):
        params = {"w": np.array([1.0])}
        moments = adam_init(params)
        moments["m"]["w"][:] = 1.0
        moments["v"]["w"][:] = 1.0
        adam_step(params, {"w": np.zeros(1)}, moments, 5, 0.0)
        assert moments["m"]["w"][0] == pytest.approx(0.9)
        assert moments["v"]["w"][0] == pytest.approx(0.999)

    def test_scalar_first_step_magnitude(self):
        # bias correction makes the first step approximately the learning rate
        lr = 0.05
        params = {"w": np.array([0.0])}
        moments = adam_init(params)
        adam_step(params, {"w": np.array([1.0])}, moments, 1, lr)
        assert abs(params["w"][0] + lr) < 1e-6 * lr + 1e-9

    def test_determinism_100_steps(self):
        def run():
            rng = np.random.default_rng(3)
            params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
            moments = adam_init(params)
            for t in range(1, 101):
                grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
                adam_step(params, grads, moments, t, 1e-3)
            return params
        p1, p2 = run(), run()
        np.testing.assert_array_equal(p1["a"], p2["a"])
        np.testing.assert_array_equal(p1["b"], p2["b"])

    def test_non_finite_grads_raise(self):
        params = {"w": np.zeros(2)}
        moments = adam_init(params)
        with pytest.raises(DivergedError):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, moments, 1, 0.1)


class TestCopyMemory:
    def test_reproducible(self):
        a = copy_memory_batch(5, 8, 16, seed=42)
        b = copy_memory_batch(5, 8, 16, seed=42)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_structure(self):
        delay, k = 7, 10
        inputs, targets = copy_memory_batch(delay, 8, 4, seed=1, prefix_len=k)
        assert inputs.shape == (4, 2 * k + delay + 1)
        trigger_pos = k + delay
        assert np.all(inputs[:, trigger_pos] == 9)
        assert np.all(inputs[:, k:trigger_pos] == 0)
        # targets are blank through the trigger, then reproduce the prefix
        assert np.all(targets[:, : trigger_pos + 1] == 0)
        np.testing.assert_array_equal(targets[:, trigger_pos + 1 :], inputs[:, :k])

    def test_symbol_histogram_uniform(self):
        n_sym, batch, k = 8, 1000, 10
        inputs, _ = copy_memory_batch(3, n_sym, batch, seed=9, prefix_len=k)
        symbols = inputs[:, :k].ravel()
        n = symbols.size
        p = 1.0 / n_sym
        sigma = math.sqrt(n * p * (1 - p))
        for s in range(1, n_sym + 1):
            count = int((symbols == s).sum())
            assert abs(count - n * p) < 3 * sigma

    def test_one_hot(self):
        out = one_hot(np.array([[0, 2], [1, 0]]), 3)
        assert out.shape == (2, 2, 3)
        np.testing.assert_array_equal(out[0, 1], [0, 0, 1])


class TestAffine:
    def test_forward_backward(self, rng):
        params = affine_init(4, 3, rng)
        x = rng.normal(size=(5, 4))
        y = affine_forward(params, x)
        assert y.shape == (5, 3)
        dy = rng.normal(size=(5, 3))
        g, dx = affine_backward(params, x, dy)
        eps = 1e-6
        for idx in [(0, 0), (2, 1), (3, 2)]:
            orig = params["W"][idx]
            params["W"][idx] = orig + eps
            lp = float((affine_forward(params, x) * dy).sum())
            params["W"][idx] = orig - eps
            lm = float((affine_forward(params, x) * dy).sum())
            params["W"][idx] = orig
            assert g["W"][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-6)


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        meta = {"kind": "test", "units": "5"}
        tensors = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=7)}
        path = tmp_path / "net.ckpt"
        checkpoint.save_checkpoint(path, meta, tensors)
        assert path.read_bytes()[:4] == b"PFCK"
        meta2, tensors2 = checkpoint.load_checkpoint(path)
        assert meta2 == meta
        for k in tensors:
            np.testing.assert_array_equal(tensors[k], tensors2[k])

    def test_deterministic_bytes(self, rng, tmp_path):
        tensors = {"z": rng.normal(size=4), "a": rng.normal(size=(2, 2))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_checkpoint(p1, {"k": "v"}, tensors)
        checkpoint.save_checkpoint(p2, {"k": "v"}, dict(reversed(tensors.items())))
        assert p1.read_bytes() == p2.read_bytes()


class TestCfnDynamics:
    def test_bounded_and_contracting(self, rng):
        """Non-chaotic dynamics: with zero input the state contracts toward
        zero; with any bounded input it stays within max(||h0||_inf, 1) + 1."""
        spec = CellSpec(CellKind.CFN, 3, 4)
        params = init_params(spec, rng)
        for trial in range(20):
            h0 = rng.normal(size=4) * rng.uniform(0.5, 3.0)
            x = rng.normal(size=(30, 3)) * rng.uniform(0.5, 5.0)
            hs, _, _ = cell_forward(spec, params, x, h0=h0)
            bound = max(float(np.abs(h0).max()), 1.0) + 1.0
            assert np.abs(hs).max() < bound
            # zero input: |h_t| <= |tanh(h_{t-1})| < |h_{t-1}|
            hs0, _, _ = cell_forward(spec, params, np.zeros((30, 3)), h0=h0)
            norms = [float(np.abs(h0).max())] + [float(np.abs(h).max()) for h in hs0]
            assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))

    def test_trnn_fully_gated_path_blocks_gradient(self):
        spec = CellSpec(CellKind.TRNN, 2, 3)
        params = {k: np.zeros_like(v) for k, v in
                  init_params(spec, np.random.default_rng(0)).items()}
        params["bf"] = np.full(3, 500.0)  # forget gate == 1 in float64
        x = np.random.default_rng(5).normal(size=(6, 2))
        hs, _, cache = cell_forward(spec, params, x, h0=np.ones(3))
        grad_h = np.zeros((6, 3))
        grad_h[-1] = 1.0  # loss = sum of h_T
        _, dx, _ = cell_backward(spec, params, cache, grad_h)
        np.testing.assert_array_equal(dx[0], np.zeros(2))
