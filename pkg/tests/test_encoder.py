import numpy as np
import pytest

from gatedlexnet.encoder import (
    ConvBlock,
    DepthwiseSeparableConv2d,
    DiffusedMixDropout,
    DSCBlock,
    Encoder,
    EncoderConfig,
    GatedConv2d,
    InstanceNorm2d,
)
from gatedlexnet.gradcheck import check_layer
from gatedlexnet.numerics import NumericalInstabilityError, conv2d, no_grad
from oracles import conv_reference, depthwise_reference, instance_norm_reference


def no_dropout(**kw):
    return EncoderConfig(dropout_elem=0.0, dropout_chan=0.0, **kw)


class TestGatedConv:
    def test_zero_weights(self, rng):
        g = GatedConv2d(2, rng)
        for k in g.params:
            g.params[k][:] = 0
        np.testing.assert_array_equal(g(rng.standard_normal((2, 4, 4))), 0.0)

    def test_saturated_gate_passes_filter(self, rng):
        g = GatedConv2d(2, rng)
        g.params["w_gate"][:] = 0
        g.params["b_gate"][:] = 20
        x = rng.standard_normal((2, 4, 4))
        expected = np.tanh(conv2d(x, g.params["w_filter"], g.params["b_filter"], 1, 1))
        np.testing.assert_allclose(g(x), expected, atol=1e-8)

    def test_matches_composed_oracle(self, rng):
        g = GatedConv2d(2, rng)
        g.params["b_filter"][:] = rng.standard_normal(2)
        g.params["b_gate"][:] = rng.standard_normal(2)
        x = rng.standard_normal((2, 4, 4))
        p = g.params
        expected = np.tanh(conv_reference(x, p["w_filter"], p["b_filter"])) / (
            1 + np.exp(-conv_reference(x, p["w_gate"], p["b_gate"])))
        np.testing.assert_allclose(g(x), expected, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            GatedConv2d(2, rng)(np.zeros((3, 4, 4)))

    def test_both_paths_receive_gradient(self, rng):
        g = GatedConv2d(3, rng)
        g(rng.standard_normal((3, 5, 5)))
        g.backward(rng.standard_normal((3, 5, 5)))
        assert np.abs(g.grads["w_filter"]).sum() > 0 and np.abs(g.grads["w_gate"]).sum() > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        results = check_layer(GatedConv2d(2, rng), rng.standard_normal((2, 5, 4)), rng, n_probe=None)
        assert all(r.ok for r in results), [r.line() for r in results]


class TestInstanceNorm:
    def test_constant_channel(self):
        np.testing.assert_allclose(InstanceNorm2d(1)(np.full((1, 3, 3), 7.0)), 0.0)

    def test_two_values(self):
        out = InstanceNorm2d(1)(np.array([[[0.0, 2.0]]]))
        np.testing.assert_allclose(out, [[[-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)]]], atol=1e-12)

    def test_zero_gamma(self, rng):
        n = InstanceNorm2d(3)
        n.params["gamma"][:] = 0
        n.params["beta"][:] = [1.0, 2.0, 3.0]
        np.testing.assert_array_equal(n(rng.standard_normal((3, 4, 4))), np.broadcast_to([[[1.0]], [[2.0]], [[3.0]]], (3, 4, 4)))

    def test_normalized_statistics(self, rng):
        xhat, _ = InstanceNorm2d(4).normalize(5 + 3 * rng.standard_normal((4, 6, 7)))
        assert np.all(np.abs(xhat.mean(axis=(1, 2))) < 1e-6)
        assert np.all(np.abs(xhat.var(axis=(1, 2)) - 1) < 1e-4)

    def test_oracle(self, rng):
        n = InstanceNorm2d(3)
        n.params["gamma"][:] = rng.standard_normal(3)
        n.params["beta"][:] = rng.standard_normal(3)
        x = rng.standard_normal((3, 4, 5))
        np.testing.assert_allclose(n(x), instance_norm_reference(x, n.params["gamma"], n.params["beta"]), atol=1e-12)

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            InstanceNorm2d(2, eps=0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        n = InstanceNorm2d(3)
        n.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
        results = check_layer(n, rng.standard_normal((3, 4, 5)), rng, n_probe=None)
        assert all(r.ok for r in results), [r.line() for r in results]


class TestDepthwiseSeparable:
    def test_single_channel_equals_conv(self, rng):
        d = DepthwiseSeparableConv2d(1, 1, rng=rng)
        d.params["pointwise"][:] = 1.0
        x = rng.standard_normal((1, 5, 6))
        np.testing.assert_allclose(d(x), conv2d(x, d.params["depthwise"][:, None], None, 1, 1), atol=1e-12)

    def test_matches_expanded_full_convolution(self, rng):
        d = DepthwiseSeparableConv2d(3, 4, stride=(2, 1), rng=rng)
        p = d.params
        p["depthwise_bias"][:] = rng.standard_normal(3)
        p["pointwise_bias"][:] = rng.standard_normal(4)
        pw = p["pointwise"][:, :, 0, 0]
        full = pw[:, :, None, None] * p["depthwise"][None]
        bias = pw @ p["depthwise_bias"] + p["pointwise_bias"]
        x = rng.standard_normal((3, 7, 6))
        np.testing.assert_allclose(d(x), conv_reference(x, full, bias, (2, 1)), atol=1e-12)

    def test_two_stage_oracle(self, rng):
        d = DepthwiseSeparableConv2d(2, 3, rng=rng)
        p = d.params
        x = rng.standard_normal((2, 5, 5))
        mid = depthwise_reference(x, p["depthwise"], p["depthwise_bias"])
        np.testing.assert_allclose(d(x), conv_reference(mid, p["pointwise"], p["pointwise_bias"]), atol=1e-12)

    def test_parameter_count(self):
        assert DepthwiseSeparableConv2d.count_params(32, 32, 3, bias=False) == 288 + 1024
        assert DepthwiseSeparableConv2d.count_params(32, 32, 3, bias=False) < 32 * 32 * 9
        assert DepthwiseSeparableConv2d(32, 32).num_params() == DepthwiseSeparableConv2d.count_params(32, 32)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        results = check_layer(DepthwiseSeparableConv2d(2, 3, stride=2, rng=rng), rng.standard_normal((2, 6, 5)),
                              rng, n_probe=None)
        assert all(r.ok for r in results), [r.line() for r in results]


class TestDropout:
    def test_eval_is_identity(self, rng):
        x = rng.standard_normal((3, 4, 4))
        np.testing.assert_array_equal(DiffusedMixDropout(rng=rng)(x), x)

    def test_one_mode_per_call(self, rng):
        d = DiffusedMixDropout(0.25, 0.25, 0.5, rng)
        d.train()
        x = np.ones((8, 16, 16))
        modes = set()
        for _ in range(40):
            y = d(x)
            zero = y == 0
            per_channel = zero.all(axis=(1, 2)) | (~zero).all(axis=(1, 2))
            modes.add("channel" if per_channel.all() and zero.any() else "element" if zero.any() else "none")
            np.testing.assert_allclose(np.unique(y[y != 0]), 1 / 0.75)
        assert {"channel", "element"} <= modes

    def test_backward_uses_same_mask(self, rng):
        d = DiffusedMixDropout(rng=rng)
        d.train()
        y = d(np.ones((4, 5, 5)))
        np.testing.assert_array_equal(d.backward(np.ones((4, 5, 5))), y)


class TestBlocks:
    def test_stride_shape(self, rng):
        with no_grad():
            y = ConvBlock(1, 4, (2, 2), no_dropout(), rng)(rng.standard_normal((1, 32, 32)))
        assert y.shape == (4, 16, 16)

    def test_zero_input_is_deterministic(self, rng):
        block = ConvBlock(1, 3, (2, 2), no_dropout(), rng)
        with no_grad():
            np.testing.assert_array_equal(block(np.zeros((1, 8, 8))), 0.0)
            for _, layer, key in block.named_parameters():
                if key == "beta":
                    layer.params[key][:] = 0.3
            a, b = block(np.zeros((1, 8, 8))), block(np.zeros((1, 8, 8)))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("placement,n_layers", [("early", 4), ("late", 4), ("none", 3)])
    def test_gated_placement(self, rng, placement, n_layers):
        block = ConvBlock(1, 2, 1, no_dropout(gated_placement=placement), rng)
        assert len(block.layers) == n_layers
        kinds = [type(layer).__name__ for layer in block.layers]
        if placement == "early":
            assert kinds.index("GatedConv2d") == 2
        elif placement == "late":
            assert kinds.index("GatedConv2d") == 3

    def test_gated_norm_flag(self, rng):
        block = ConvBlock(1, 2, 1, no_dropout(gated_norm=True), rng)
        assert [type(layer).__name__ for layer in block.layers][2:4] == ["GatedConv2d", "InstanceNorm2d"]

    def test_dscb_fewer_params(self, rng):
        for c_in, c_out in [(8, 8), (16, 32), (64, 64), (128, 128)]:
            block = DSCBlock(c_in, c_out, no_dropout(), rng)
            assert block.num_params() < DSCBlock.standard_equivalent_params(c_in, c_out)

    @pytest.mark.parametrize("seed", range(5))
    def test_block_gradient(self, seed):
        rng = np.random.default_rng(seed)
        block = ConvBlock(2, 3, (2, 1), no_dropout(), rng)
        block.train()
        results = check_layer(block, rng.standard_normal((2, 6, 5)), rng, n_probe=15)
        assert all(r.ok for r in results), [r.line() for r in results]


class TestEncoder:
    def test_toy_geometry(self, rng):
        enc = Encoder(no_dropout(), rng)
        with no_grad():
            f = enc(rng.uniform(size=(1, 64, 64)))
        assert f.shape == (64, 8, 16)
        assert EncoderConfig().downsampling() == (8, 4)
        assert EncoderConfig.full().downsampling() == (32, 8)

    def test_residual_when_shapes_match(self, rng):
        enc = Encoder(no_dropout(cb_channels=[3, 3], cb_strides=[(1, 1), (2, 2)], dscb_channels=[3], in_channels=3), rng)
        x = rng.standard_normal((3, 8, 8))
        with no_grad():
            b0 = enc.blocks[0](x)
            b1 = enc.blocks[1](b0 + x)
            b2 = enc.blocks[2](b1)
            np.testing.assert_array_equal(enc(x), b2 + b1)

    def test_eval_determinism(self, rng):
        x = rng.uniform(size=(1, 16, 16))
        a = Encoder(EncoderConfig(), np.random.default_rng(3)).eval()
        b = Encoder(EncoderConfig(), np.random.default_rng(3)).eval()
        with no_grad():
            assert a(x).tobytes() == b(x).tobytes()

    def test_nan_names_block(self, rng):
        enc = Encoder(no_dropout(), rng)
        enc.blocks[2].layers[0].conv.params["bias"][0] = np.nan
        with pytest.raises(NumericalInstabilityError, match="encoder block 2"):
            with no_grad():
                enc(rng.uniform(size=(1, 16, 16)))

    def test_dscb_counts(self, rng):
        counts = Encoder(EncoderConfig(), rng).dscb_param_counts()
        assert len(counts) == 2
        assert all(actual < standard for actual, standard in counts)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="cb_strides"):
            EncoderConfig(cb_channels=[4], cb_strides=[(1, 1), (2, 2)])
        with pytest.raises(ValueError, match="gated_placement"):
            EncoderConfig(gated_placement="middle")

    @pytest.mark.parametrize("seed", range(2))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        enc = Encoder(no_dropout(cb_channels=[2, 3], cb_strides=[(1, 1), (2, 2)], dscb_channels=[3], in_channels=2), rng)
        enc.train()
        results = check_layer(enc, rng.standard_normal((2, 6, 6)), rng, n_probe=6)
        assert all(r.ok for r in results), [r.line() for r in results]
