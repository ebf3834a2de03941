import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from amdefect import tensor as T
from amdefect.models import ModelSpec, Network
from amdefect.tensor import Tensor
from amdefect.training import (AdamConfig, AdamState, AugmentConfig, EarlyStopConfig, TrainConfig, adam_step,
                               augment, bce, early_stop_check, fit, mse, sparse_cce)
from gradcheck import REL_TOL, check_op


class TestLosses:
    def test_cce_true_class_prob_one(self):
        probs = Tensor([[0.0, 1.0, 0.0, 0.0]])
        assert float(sparse_cce(probs, [1], from_logits=False).data) == pytest.approx(0.0, abs=1e-6)

    def test_cce_uniform(self):
        probs = Tensor(np.full((3, 4), 0.25))
        assert float(sparse_cce(probs, [0, 1, 3], from_logits=False).data) == pytest.approx(math.log(4), abs=1e-6)
        logits = Tensor(np.zeros((3, 4)))
        assert float(sparse_cce(logits, [0, 1, 3]).data) == pytest.approx(1.3863, abs=1e-4)

    def test_cce_batch_mean(self):
        probs = Tensor([[0.5, 0.5], [0.2, 0.8]])
        expected = (-math.log(0.5) - math.log(0.2)) / 2
        assert float(sparse_cce(probs, [0, 0], from_logits=False).data) == pytest.approx(expected, rel=1e-6)

    def test_cce_logits_match_probs(self, rng):
        logits = rng.standard_normal((5, 4))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        y = rng.integers(0, 4, 5)
        a = float(sparse_cce(Tensor(logits), y).data)
        b = float(sparse_cce(Tensor(p), y, from_logits=False).data)
        assert a == pytest.approx(b, rel=1e-5)

    def test_cce_bad_labels(self):
        with pytest.raises(ValueError):
            sparse_cce(Tensor(np.zeros((2, 3))), [0, 3])

    def test_bce_half(self):
        assert float(bce(Tensor(np.full((4, 1), 0.5)), [0, 1, 1, 0]).data) == pytest.approx(0.6931, abs=1e-4)

    def test_bce_exact_targets(self):
        assert float(bce(Tensor([[1.0], [0.0]]), [1, 0]).data) <= 1e-6

    @given(st.floats(0.01, 0.99))
    def test_bce_symmetry(self, p):
        a = float(bce(Tensor([[p]], dtype=np.float64), [1]).data)
        b = float(bce(Tensor([[1 - p]], dtype=np.float64), [0]).data)
        assert a == pytest.approx(b, rel=1e-9)

    def test_mse_cases(self, rng):
        t = rng.random((3, 4))
        assert float(mse(Tensor(t), t).data) == 0.0
        assert float(mse(Tensor(t + 0.1, dtype=np.float64), t).data) == pytest.approx(0.01, rel=1e-9)
        p = rng.random((2, 3, 2))
        q = rng.random((2, 3, 2))
        total = 0.0
        for i in range(2):
            for j in range(3):
                for k in range(2):
                    total += (p[i, j, k] - q[i, j, k]) ** 2
        assert float(mse(Tensor(p, dtype=np.float64), q).data) == pytest.approx(total / 12, rel=1e-12)

    def test_softmax_cce_gradient(self):
        rng = np.random.default_rng(5)
        y = rng.integers(0, 4, 6)
        errs = check_op(lambda z: T.reshape(sparse_cce(z, y), (1,)), [rng.standard_normal((6, 4))], [0],
                        probes=12, seed=2)
        assert max(errs) < REL_TOL

    def test_bce_mse_gradients(self):
        rng = np.random.default_rng(6)
        t = rng.integers(0, 2, (5, 1))
        errs = check_op(lambda p: T.reshape(bce(p, t), (1,)), [rng.uniform(0.1, 0.9, (5, 1))], [0], probes=5)
        tgt = rng.random((3, 4))
        errs += check_op(lambda p: T.reshape(mse(p, tgt), (1,)), [rng.random((3, 4))], [0], probes=6)
        assert max(errs) < REL_TOL


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, AdamState(), AdamConfig())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_hand_computed(self):
        p = {"w": np.array([0.0], dtype=np.float64)}
        adam_step(p, {"w": np.array([0.5])}, AdamState(), AdamConfig(lr=0.001))
        # m_hat = 0.5, v_hat = 0.25 -> step = lr * 0.5 / (0.5 + eps)
        assert p["w"][0] == pytest.approx(-0.001 * 0.5 / (0.5 + 1e-7), rel=1e-12)
        assert abs(p["w"][0]) == pytest.approx(0.001, rel=1e-6)

    def test_deterministic_runs(self):
        def run():
            rng = np.random.default_rng(4)
            p = {"w": rng.standard_normal(8).astype(np.float32)}
            s = AdamState()
            for _ in range(10):
                adam_step(p, {"w": (2 * p["w"] - 1).astype(np.float32)}, s, AdamConfig())
            return p["w"].tobytes()

        assert run() == run()


class TestEarlyStopping:
    def test_strict_improvement_continues(self):
        losses = [1.0 - 0.01 * k for k in range(40)]
        assert not early_stop_check(losses, 0.002, 10)

    def test_stop_after_patience(self):
        assert not early_stop_check([1.0] + [0.999] * 9, 0.002, 10)
        assert early_stop_check([1.0] + [0.999] * 10, 0.002, 10)

    def test_stop_triggers_exactly_at_patience(self):
        losses = [2.0, 1.5, 1.0]
        for k in range(1, 12):
            losses.append(1.0 + 0.001 * (k % 3))
            assert early_stop_check(losses, 0.002, 10) == (k >= 10)

    def test_improvement_exactly_min_delta_resets(self):
        losses = [1.0] + [1.0] * 9 + [0.998] + [0.998] * 9
        assert not early_stop_check(losses, 0.002, 10)
        assert early_stop_check(losses + [0.998], 0.002, 10)

    def test_improvement_just_below_min_delta_does_not_reset(self):
        losses = [1.0] + [1.0] * 9 + [0.9981]
        assert early_stop_check(losses, 0.002, 10)


class TestAugment:
    def test_zero_ranges_identity(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        cfg = AugmentConfig(0.0, 0.0, 0.0)
        np.testing.assert_array_equal(augment(img, cfg, 1), img)

    def test_rot90_permutation(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[:, :, None]
        out = augment(img, AugmentConfig(), angle=90.0, zoom=1.0, shift=(0.0, 0.0))
        # positive angle turns the picture clockwise: out[y, x] = img[1 - x, y]
        np.testing.assert_array_equal(out[:, :, 0], [[3.0, 1.0], [4.0, 2.0]])
        np.testing.assert_array_equal(out, np.rot90(img, k=-1))

    def test_full_width_shift_zero_fill(self, rng):
        img = rng.random((6, 6, 3)).astype(np.float32) + 0.1
        out = augment(img, AugmentConfig(), angle=0.0, zoom=1.0, shift=(0.0, 6.0))
        assert np.all(out == 0)

    def test_random_draw_seeded(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        a = augment(img, AugmentConfig(), 11)
        b = augment(img, AugmentConfig(), 11)
        np.testing.assert_array_equal(a, b)


def _toy_model(seed=0):
    return Network(ModelSpec("toy", (2,), [{"kind": "dense", "units": 2}, {"kind": "softmax"}]), seed=seed)


def _toy_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 2)).astype(np.float32)
    y = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    x += np.where(y[:, None] == 1, 0.5, -0.5).astype(np.float32)   # margin
    return x, y


class TestFit:
    def test_steps_per_epoch(self):
        x, y = _toy_data(70)
        _, hist = fit(_toy_model(), x, y, TrainConfig(max_epochs=1))
        assert hist.steps == math.ceil(70 / 32) == 3

    def test_separable_toy_converges(self):
        x, y = _toy_data(64)
        cfg = TrainConfig(max_epochs=50, adam=AdamConfig(lr=0.05), batch_size=16)
        model, hist = fit(_toy_model(), x, y, cfg)
        assert min(hist.loss) < 0.05

    def test_same_seed_same_history(self):
        x, y = _toy_data(64)
        cfg = TrainConfig(max_epochs=5, seed=3)
        m1, h1 = fit(_toy_model(), x, y, cfg)
        m2, h2 = fit(_toy_model(), x, y, cfg)
        assert h1 == h2
        assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)

    def test_zero_epochs_leaves_weights(self):
        x, y = _toy_data(16)
        m = _toy_model()
        before = {k: v.copy() for k, v in m.params.items()}
        _, hist = fit(m, x, y, TrainConfig(max_epochs=0))
        assert hist.steps == 0
        assert all(np.array_equal(before[k], m.params[k]) for k in before)

    def test_early_stop_reason(self):
        x, y = _toy_data(16)
        cfg = TrainConfig(max_epochs=200, adam=AdamConfig(lr=1e-9),
                          early_stop=EarlyStopConfig(min_delta=0.002, patience=10))
        _, hist = fit(_toy_model(), x, y, cfg)
        assert hist.stop_reason == "early_stopped"
        assert len(hist.loss) == 11

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            fit(_toy_model(), np.zeros((0, 2), np.float32), np.zeros(0, np.int64), TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(adam=AdamConfig(beta1=1.0)),
                                        dict(early_stop=EarlyStopConfig(patience=0)),
                                        dict(early_stop=EarlyStopConfig(min_delta=-1))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(batch_size=8, max_epochs=3, adam=AdamConfig(lr=0.01), seed=9,
                          augment=AugmentConfig(enabled=True))
        cfg.save(tmp_path / "t.cfg")
        assert TrainConfig.load(tmp_path / "t.cfg") == cfg

    def test_unknown_key(self, tmp_path):
        (tmp_path / "t.cfg").write_text("adam.lrr = 1\n")
        with pytest.raises(KeyError):
            TrainConfig.load(tmp_path / "t.cfg")
