import numpy as np
import pytest

from flowreg.velocity_net import (
    MLPParams,
    NetConfig,
    ParamGradient,
    backward_batch,
    constant_velocity_params,
    forward,
    forward_batch,
    forward_batch_tape,
    init_params,
)


class TestNetConfig:
    def test_defaults(self):
        cfg = NetConfig()
        assert cfg.hidden_width == 64
        assert cfg.activation == "sine"
        assert cfg.sine_frequency == 30.0

    def test_rejects_bad_activation(self):
        with pytest.raises(ValueError):
            NetConfig(activation="relu")

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            NetConfig(hidden_width=0)


class TestInitParams:
    def test_zero_output_layer(self):
        params = init_params(NetConfig(seed=3))
        assert np.all(params.w3 == 0.0)
        assert np.all(params.b3 == 0.0)

    def test_forward_is_zero_at_init(self):
        params = init_params(NetConfig(seed=4))
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, size=(40, 3))
        out = forward_batch(params, pts, 0.7)
        assert np.array_equal(out, np.zeros((40, 3)))

    def test_same_seed_bit_identical(self):
        a = init_params(NetConfig(seed=11))
        b = init_params(NetConfig(seed=11))
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        a = init_params(NetConfig(seed=1))
        b = init_params(NetConfig(seed=2))
        assert not np.array_equal(a.w1, b.w1)

    def test_fan_in_bounds(self):
        params = init_params(NetConfig(seed=5, activation="tanh", hidden_width=16))
        assert np.max(np.abs(params.w1)) <= 0.5
        assert np.max(np.abs(params.w2)) <= 1.0 / 4.0

    def test_sine_first_layer_scaling(self):
        # sine convention: first-layer weights shrink by another 1/sqrt(fan_in)
        tanh_p = init_params(NetConfig(seed=7, activation="tanh"))
        sine_p = init_params(NetConfig(seed=7, activation="sine"))
        np.testing.assert_allclose(sine_p.w1, tanh_p.w1 * 0.5, atol=1e-15)
        np.testing.assert_allclose(sine_p.b1, tanh_p.b1, atol=1e-15)

    def test_shape_validation(self):
        cfg = NetConfig(hidden_width=4)
        with pytest.raises(ValueError):
            MLPParams(cfg, np.zeros((4, 3)), np.zeros(4), np.zeros((4, 4)),
                      np.zeros(4), np.zeros((3, 4)), np.zeros(3))


class TestForward:
    def test_hand_net_zero_input(self):
        cfg = NetConfig(hidden_width=1, activation="tanh")
        params = MLPParams(cfg, np.ones((1, 4)), np.zeros(1), np.ones((1, 1)),
                           np.zeros(1), np.ones((3, 1)), np.zeros(3))
        out = forward(params, (0.0, 0.0, 0.0, 0.0))
        assert np.array_equal(out, np.zeros(3))

    def test_hand_net_evaluation(self):
        # layer1 = [1,0,0,0], layer2 = [1], layer3 = [[2],[0],[0]]
        cfg = NetConfig(hidden_width=1, activation="tanh")
        params = MLPParams(cfg,
                           np.array([[1.0, 0.0, 0.0, 0.0]]), np.zeros(1),
                           np.array([[1.0]]), np.zeros(1),
                           np.array([[2.0], [0.0], [0.0]]), np.zeros(3))
        out = forward(params, (0.5, 0.0, 0.0, 0.0))
        expect = 2.0 * np.tanh(np.tanh(0.5))
        assert out[0] == pytest.approx(expect, abs=1e-15)
        assert out[1] == 0.0 and out[2] == 0.0

    def test_sine_frequency_applies_to_first_layer_only(self):
        cfg = NetConfig(hidden_width=1, activation="sine", sine_frequency=30.0)
        params = MLPParams(cfg,
                           np.array([[1.0, 0.0, 0.0, 0.0]]), np.zeros(1),
                           np.array([[1.0]]), np.zeros(1),
                           np.array([[1.0], [0.0], [0.0]]), np.zeros(3))
        out = forward(params, (0.01, 0.0, 0.0, 0.0))
        assert out[0] == pytest.approx(np.sin(np.sin(30.0 * 0.01)), abs=1e-15)

    def test_batch_matches_individual_calls(self):
        params = init_params(NetConfig(seed=8, hidden_width=8))
        params.w3[:] = np.random.default_rng(1).normal(size=(3, 8))
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, size=(10, 3))
        batch = forward_batch(params, pts, 0.25)
        for i in range(10):
            single = forward(params, (*pts[i], 0.25))
            assert np.array_equal(batch[i], single)

    def test_empty_batch(self):
        params = init_params(NetConfig(seed=9))
        out = forward_batch(params, np.zeros((0, 3)), 1.0)
        assert out.shape == (0, 3)

    def test_deterministic(self):
        params = init_params(NetConfig(seed=10))
        pts = np.random.default_rng(3).uniform(-1, 1, size=(5, 3))
        assert np.array_equal(forward_batch(params, pts, 0.5),
                              forward_batch(params, pts, 0.5))

    def test_constant_velocity_params(self):
        for act in ("sine", "tanh"):
            params = constant_velocity_params(NetConfig(seed=0, activation=act), (0.1, -0.2, 0.3))
            pts = np.random.default_rng(4).uniform(-1, 1, size=(6, 3))
            out = forward_batch(params, pts, 0.8)
            np.testing.assert_array_equal(out, np.tile([0.1, -0.2, 0.3], (6, 1)))


class TestBackwardBatch:
    @pytest.mark.parametrize("activation", ["sine", "tanh"])
    def test_param_gradients_match_finite_differences(self, activation):
        cfg = NetConfig(hidden_width=5, activation=activation, sine_frequency=2.0, seed=12)
        params = init_params(cfg)
        rng = np.random.default_rng(13)
        params.w3[:] = rng.normal(scale=0.3, size=(3, 5))
        params.b3[:] = rng.normal(scale=0.3, size=3)
        pts = rng.uniform(-1, 1, size=(7, 3))
        upstream = rng.normal(size=(7, 3))
        t = 0.4

        _, tape = forward_batch_tape(params, pts, t)
        grad, gpts = backward_batch(params, tape, upstream)

        eps = 1e-6

        def loss(p):
            return float(np.sum(forward_batch(p, pts, t) * upstream))

        for arr, g in zip(params.arrays(), grad.arrays()):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = loss(params)
                flat[j] = orig - eps
                lo = loss(params)
                flat[j] = orig
                assert gflat[j] == pytest.approx((hi - lo) / (2 * eps), rel=1e-5, abs=1e-7)

    def test_position_gradients_match_finite_differences(self):
        cfg = NetConfig(hidden_width=6, activation="sine", sine_frequency=3.0, seed=14)
        params = init_params(cfg)
        rng = np.random.default_rng(15)
        params.w3[:] = rng.normal(scale=0.3, size=(3, 6))
        pts = rng.uniform(-1, 1, size=(5, 3))
        upstream = rng.normal(size=(5, 3))
        _, tape = forward_batch_tape(params, pts, 0.6)
        _, gpts = backward_batch(params, tape, upstream)
        eps = 1e-6
        for i in range(5):
            for ax in range(3):
                shifted = pts.copy()
                shifted[i, ax] += eps
                hi = float(np.sum(forward_batch(params, shifted, 0.6) * upstream))
                shifted[i, ax] -= 2 * eps
                lo = float(np.sum(forward_batch(params, shifted, 0.6) * upstream))
                assert gpts[i, ax] == pytest.approx((hi - lo) / (2 * eps), rel=1e-5, abs=1e-8)


class TestParamGradient:
    def test_zeros_like_shapes(self):
        params = init_params(NetConfig(seed=16, hidden_width=3))
        g = ParamGradient.zeros_like(params)
        for a, b in zip(g.arrays(), params.arrays()):
            assert a.shape == b.shape
            assert np.all(a == 0.0)

    def test_max_abs(self):
        params = init_params(NetConfig(seed=17, hidden_width=3))
        g = ParamGradient.zeros_like(params)
        g.w2[1, 2] = -4.5
        assert g.max_abs() == 4.5
