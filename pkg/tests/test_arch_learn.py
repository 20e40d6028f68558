import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from archlearn.arch_learn import (DivergenceError, RegConfig, TrainConfig, Trainer,
                                  binarizing_penalty, complexity_norm, current_architecture,
                                  model_complexity_penalty, prepare_gates, read_metrics_csv,
                                  regularizer_grads, sgd_step, suggest_lambdas, train,
                                  write_metrics_csv)
from archlearn.core_math import SeededRng
from archlearn.data_io import synth_blobs
from archlearn.layers import Gradients, accuracy, init_network, loss_and_grads
from nets import random_gated_mlp

REG = RegConfig(lambda1=0.3, lambda2=0.2, lambda3=0.05, lambda4=0.07)


def total_penalty(net, reg, d_flags):
    """Both penalties with the depth indicator frozen at ``d_flags``."""
    total = binarizing_penalty(net, reg)[0]
    for layer, linear in zip(net.gated_layers, d_flags):
        if not linear:
            total += reg.lambda3 * float(np.sum(layer.gate.w))
        total -= reg.lambda4 * layer.gate.d
    return total


class TestPenalties:
    def test_binarizing_by_hand(self):
        net = random_gated_mlp(0, widths=(2, 2, 2, 2))
        net.gated_layers[0].gate.w = np.array([0.5, 1.0])
        net.gated_layers[0].gate.d = 0.25
        net.gated_layers[1].gate.w = np.array([0.1, 0.0])
        net.gated_layers[1].gate.d = 1.0
        total, width, depth = binarizing_penalty(net, RegConfig(lambda1=2.0, lambda2=4.0))
        assert width == pytest.approx(2.0 * (0.25 + 0.09))
        assert depth == pytest.approx(4.0 * 0.1875)
        assert total == pytest.approx(width + depth)

    def test_complexity_counts_only_nonlinear_layers(self):
        net = random_gated_mlp(0, widths=(2, 3, 2, 2))
        a, b = net.gated_layers
        a.gate.w, a.gate.d = np.array([1.0, 0.5, 0.0]), 0.2
        b.gate.w, b.gate.d = np.array([1.0, 1.0]), 0.9
        reg = RegConfig(lambda3=2.0, lambda4=3.0)
        assert model_complexity_penalty(net, reg) == pytest.approx(2.0 * 1.5 - 3.0 * 0.2 - 3.0 * 0.9)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        net = random_gated_mlp(seed)
        flags = [l.gate.d >= 0.5 for l in net.gated_layers]
        analytic = regularizer_grads(net, REG)
        h = 1e-6
        for layer, (dw, dd) in zip(net.gated_layers, analytic):
            for j in range(layer.width):
                orig = layer.gate.w[j]
                layer.gate.w[j] = orig + h
                up = total_penalty(net, REG, flags)
                layer.gate.w[j] = orig - h
                down = total_penalty(net, REG, flags)
                layer.gate.w[j] = orig
                assert abs((up - down) / (2 * h) - dw[j]) < 1e-8
            orig = layer.gate.d
            layer.gate.d = orig + h
            up = total_penalty(net, REG, flags)
            layer.gate.d = orig - h
            down = total_penalty(net, REG, flags)
            layer.gate.d = orig
            assert abs((up - down) / (2 * h) - dd) < 1e-8

    def test_regularizer_alone_binarizes(self):
        net = random_gated_mlp(1, widths=(4, 6, 3))
        gate = net.gated_layers[0].gate
        gate.w = np.array([0.05, 0.3, 0.55, 0.65, 0.75, 0.95])
        gate.d = 0.0
        reg = RegConfig(lambda1=1.0, lambda3=0.4, step_clip=0.1)
        zero = Gradients([None] * 2, [None] * 2, [np.zeros(6), None], [0.0, None])
        cfg = TrainConfig(lr=0.05)
        for _ in range(500):
            sgd_step(net, zero, regularizer_grads(net, reg), cfg, reg)
        # fixed point of lambda1 (1 - 2w) + lambda3 = 0 is w = 0.7
        np.testing.assert_array_equal(gate.w, [0, 0, 0, 0, 1, 1])


class TestSgdStep:
    def _grads_like(self, net, value):
        n = len(net.layers)
        g = Gradients([None] * n, [None] * n, [None] * n, [None] * n)
        for i, layer in enumerate(net.layers):
            g.weights[i] = np.full_like(layer.weights, value)
            g.bias[i] = np.full_like(layer.bias, value)
            if layer.gate is not None:
                g.w[i] = np.full(layer.width, value)
                g.d[i] = value
        return g

    def test_weights_use_momentum(self):
        net = random_gated_mlp(0)
        w0 = net.layers[0].weights.copy()
        state = {}
        cfg = TrainConfig(lr=0.1, momentum=0.9)
        zero_reg = RegConfig()
        grads = self._grads_like(net, 1.0)
        sgd_step(net, grads, regularizer_grads(net, zero_reg), cfg, zero_reg, state)
        sgd_step(net, grads, regularizer_grads(net, zero_reg), cfg, zero_reg, state)
        # v1 = -0.1, v2 = 0.9 * v1 - 0.1
        np.testing.assert_allclose(net.layers[0].weights, w0 - 0.1 - 0.19, rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 0.5), st.integers(0, 100))
    def test_gate_step_clipped_and_projected(self, g, clip, seed):
        net = random_gated_mlp(seed)
        before = [(l.gate.w.copy(), l.gate.d) for l in net.gated_layers]
        reg = RegConfig(step_clip=clip)
        sgd_step(net, self._grads_like(net, g), regularizer_grads(net, reg),
                 TrainConfig(lr=1.0, gate_lr_scale=10.0), reg)
        for layer, (w, d) in zip(net.gated_layers, before):
            assert np.all(np.abs(layer.gate.w - w) <= clip + 1e-12)
            assert abs(layer.gate.d - d) <= clip + 1e-12
            assert np.all((layer.gate.w >= 0) & (layer.gate.w <= 1))
            assert 0.0 <= layer.gate.d <= 1.0

    def test_frozen_gates_do_not_move(self):
        net = random_gated_mlp(2)
        for layer in net.gated_layers:
            layer.gate.learn_w = layer.gate.learn_d = False
        before = [(l.gate.w.copy(), l.gate.d) for l in net.gated_layers]
        sgd_step(net, self._grads_like(net, 5.0), regularizer_grads(net, REG), TrainConfig(), REG)
        for layer, (w, d) in zip(net.gated_layers, before):
            np.testing.assert_array_equal(layer.gate.w, w)
            assert layer.gate.d == d

    def test_non_finite_gradient(self):
        net = random_gated_mlp(0)
        with pytest.raises(DivergenceError):
            sgd_step(net, self._grads_like(net, np.nan), regularizer_grads(net, REG),
                     TrainConfig(), REG)


class TestSuggestLambdas:
    def test_reference_architecture(self):
        reg = suggest_lambdas([20, 50, 500, 10])
        assert reg.lambda3 == pytest.approx(1e-5)
        assert reg.lambda1 == pytest.approx(2.5e-5)
        assert reg.lambda2 == pytest.approx(reg.lambda1 / 10)
        assert reg.lambda4 == pytest.approx(reg.lambda3 / 10)

    def test_scales_inversely_with_widest_layer(self):
        assert suggest_lambdas([1000, 10]).lambda3 == pytest.approx(5e-6)
        assert suggest_lambdas([256, 10]).lambda3 == pytest.approx(1e-5 * 500 / 256)

    def test_empty(self):
        with pytest.raises(ValueError):
            suggest_lambdas([])


class TestArchitecture:
    def test_current_architecture_counts_on_gates(self):
        net = random_gated_mlp(0, widths=(3, 4, 2))
        net.gated_layers[0].gate.w = np.array([0.1, 0.5, 0.9, 0.4])
        assert current_architecture(net) == [2, 2]
        assert complexity_norm([2, 2]) == 4

    def test_negative_entry(self):
        with pytest.raises(ValueError):
            complexity_norm([3, -1])


def _blob_setup(seed=0, d0=0.0):
    data = synth_blobs(60, 2, 5, 6.0, seed)
    net = init_network((5,), [("fc", 8), ("fc", 8), ("out", 2)], SeededRng(seed), dtype=np.float32)
    cfg = TrainConfig(lr=0.05, batch_size=16, epochs=4, seed=seed, eval_every=5, d0=d0)
    prepare_gates(net, cfg)
    return data, net, cfg


class TestTraining:
    def test_blobs_reach_high_train_accuracy(self):
        data = synth_blobs(100, 2, 10, 8.0, 3)
        net = init_network((10,), [("fc", 16), ("out", 2)], SeededRng(3))
        cfg = TrainConfig(lr=0.05, batch_size=20, epochs=50, learn_w=False, learn_d=False)
        prepare_gates(net, cfg)
        train(net, data.images, data.labels, cfg, RegConfig())
        assert accuracy(net, data.images, data.labels) >= 0.99

    def test_baseline_gates_frozen(self):
        data, net, cfg = _blob_setup()
        cfg.learn_w = cfg.learn_d = False
        prepare_gates(net, cfg)
        _, timeline = train(net, data.images, data.labels, cfg, suggest_lambdas([8, 8]))
        assert all(r.phi == [8, 8, 2] for r in timeline)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            data, net, cfg = _blob_setup(seed=4)
            train(net, data.images, data.labels, cfg, REG)
            runs.append(net)
        for a, b in zip(runs[0].param_layers, runs[1].param_layers):
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_resume_matches_uninterrupted(self, tmp_path):
        data, net, cfg = _blob_setup(seed=1, d0=0.5)
        cfg.epochs = 3
        whole = Trainer(net.copy(), data.images, data.labels, cfg, REG)
        whole.run(max_steps=20)
        part = Trainer(net.copy(), data.images, data.labels, cfg, REG)
        part.run(max_steps=10)
        part.save(tmp_path / "mid.alnckpt")
        resumed = Trainer.resume(tmp_path / "mid.alnckpt", data.images, data.labels, cfg, REG)
        resumed.run(max_steps=10)
        assert resumed.iteration == whole.iteration == 20
        for a, b in zip(whole.net.layers, resumed.net.layers):
            for key, value in a.params().items():
                np.testing.assert_array_equal(value, b.params()[key])
            if a.gate is not None:
                np.testing.assert_array_equal(a.gate.w, b.gate.w)
                assert a.gate.d == b.gate.d

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        data, net, cfg = _blob_setup()
        cfg.lr = 1e6
        with pytest.raises(DivergenceError):
            train(net, data.images * 1e3, data.labels, cfg, REG)

    def test_metrics_recorded_every_n(self):
        data, net, cfg = _blob_setup()
        _, timeline = train(net, data.images, data.labels, cfg, REG)
        iters = [r.iteration for r in timeline]
        assert iters[:3] == [5, 10, 15]
        assert iters[-1] == 4 * math.ceil(120 / 16)

    def test_loss_gradients_finite(self):
        data, net, _ = _blob_setup()
        loss, grads, _ = loss_and_grads(net, data.images[:8].astype(np.float64), data.labels[:8])
        assert math.isfinite(loss)
        assert all(np.all(np.isfinite(g)) for g in grads.weights if g is not None)


class TestMetricsCsv:
    def test_round_trip(self, tmp_path):
        data, net, cfg = _blob_setup()
        _, timeline = train(net, data.images, data.labels, cfg, REG)
        path = tmp_path / "m.csv"
        write_metrics_csv(path, timeline, "first\nsecond")
        comments, rows = read_metrics_csv(path)
        assert comments == ["first", "second"]
        assert [r.phi for r in rows] == [r.phi for r in timeline]
        assert [r.loss for r in rows] == [r.loss for r in timeline]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("iter,loss\n1,0.5\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_metrics_csv(path)
