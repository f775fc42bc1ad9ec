"""Convolutional feature extractor.

The encoder is a stack of convolution blocks (CB) followed by depthwise
separable convolution blocks (DSCB). A CB is::

    conv1 -> ReLU -> IN -> DMD
    conv2 -> ReLU -> IN -> DMD
    gated conv                       (early placement)
    conv3(stride) -> ReLU -> IN -> DMD
    gated conv                       (late placement)

A DSCB uses depthwise separable convolutions in place of the three standard
convolutions, keeps every stride at 1 and has no gated layer. Consecutive
blocks whose output shape equals their input shape are joined by a residual
sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Activation,
    Conv2d,
    Layer,
    NumericalInstabilityError,
    _pair,
    conv2d,
    conv2d_backward,
    depthwise_conv2d,
    depthwise_conv2d_backward,
    get_dtype,
    glorot_uniform,
    sigmoid,
)

PLACEMENTS = ("early", "late", "none")


@dataclass
class EncoderConfig:
    cb_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    cb_strides: list[tuple[int, int]] = field(default_factory=lambda: [(2, 2), (2, 2), (2, 1), (1, 1)])
    dscb_channels: list[int] = field(default_factory=lambda: [64, 64])
    dropout_elem: float = 0.25
    dropout_chan: float = 0.25
    dropout_mix: float = 0.5
    gated_placement: str = "early"
    gated_norm: bool = False
    in_channels: int = 1

    def __post_init__(self):
        self.cb_strides = [tuple(int(v) for v in s) for s in self.cb_strides]
        if len(self.cb_strides) != len(self.cb_channels):
            raise ValueError(
                f"cb_strides has {len(self.cb_strides)} entries for {len(self.cb_channels)} blocks"
            )
        if self.gated_placement not in PLACEMENTS:
            raise ValueError(f"gated_placement must be one of {PLACEMENTS}, got {self.gated_placement!r}")

    @classmethod
    def full(cls, **overrides) -> "EncoderConfig":
        """Full-size configuration: height / 32, width / 8."""
        kw = dict(
            cb_channels=[16, 32, 64, 128, 128, 128],
            cb_strides=[(1, 1), (2, 2), (2, 2), (2, 2), (2, 1), (2, 1)],
            dscb_channels=[128, 128, 128, 128],
        )
        kw.update(overrides)
        return cls(**kw)

    def downsampling(self) -> tuple[int, int]:
        return (
            int(np.prod([s[0] for s in self.cb_strides])),
            int(np.prod([s[1] for s in self.cb_strides])),
        )

    @property
    def out_channels(self) -> int:
        return (self.dscb_channels or self.cb_channels)[-1]


class GatedConv2d(Layer):
    """``tanh(W_f * x + b_f) * sigmoid(W_g * x + b_g)``, 3x3, stride 1, shape preserving."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = channels * 9
        self.channels = channels
        self.add_param("w_filter", glorot_uniform(rng, (channels, channels, 3, 3), fan, fan))
        self.add_param("b_filter", np.zeros(channels, dtype=get_dtype()))
        self.add_param("w_gate", glorot_uniform(rng, (channels, channels, 3, 3), fan, fan))
        self.add_param("b_gate", np.zeros(channels, dtype=get_dtype()))

    def forward(self, x):
        if x.shape[0] != self.channels:
            raise ValueError(f"gated conv expects {self.channels} channels, got {x.shape[0]}")
        p = self.params
        a = np.tanh(conv2d(x, p["w_filter"], p["b_filter"], 1, 1))
        g = sigmoid(conv2d(x, p["w_gate"], p["b_gate"], 1, 1))
        self._save((x, a, g))
        return a * g

    def backward(self, dout):
        x, a, g = self._pop()
        da = dout * g * (1.0 - a * a)
        dg = dout * a * g * (1.0 - g)
        dx_f, dw_f, db_f = conv2d_backward(da, x, self.params["w_filter"], 1, 1)
        dx_g, dw_g, db_g = conv2d_backward(dg, x, self.params["w_gate"], 1, 1)
        self.grads["w_filter"] += dw_f
        self.grads["b_filter"] += db_f
        self.grads["w_gate"] += dw_g
        self.grads["b_gate"] += db_g
        return dx_f + dx_g


class InstanceNorm2d(Layer):
    """Per-channel normalization over spatial positions (biased variance) with affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.add_param("gamma", np.ones(channels, dtype=get_dtype()))
        self.add_param("beta", np.zeros(channels, dtype=get_dtype()))

    def normalize(self, x):
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = x.var(axis=(1, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        return (x - mu) * inv, inv

    def forward(self, x):
        xhat, inv = self.normalize(x)
        self._save((xhat, inv))
        return self.params["gamma"][:, None, None] * xhat + self.params["beta"][:, None, None]

    def backward(self, dout):
        xhat, inv = self._pop()
        n = xhat.shape[1] * xhat.shape[2]
        self.grads["gamma"] += np.einsum("chw,chw->c", dout, xhat)
        self.grads["beta"] += dout.sum(axis=(1, 2))
        dxhat = dout * self.params["gamma"][:, None, None]
        s1 = dxhat.sum(axis=(1, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        return inv / n * (n * dxhat - s1 - xhat * s2)


class DepthwiseSeparableConv2d(Layer):
    """Per-channel ``k x k`` convolution followed by a 1x1 channel-mixing convolution."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.stride = _pair(stride)
        self.pad = (k // 2, k // 2)
        self.add_param("depthwise", glorot_uniform(rng, (c_in, k, k), k * k, k * k))
        self.add_param("depthwise_bias", np.zeros(c_in, dtype=get_dtype()))
        self.add_param("pointwise", glorot_uniform(rng, (c_out, c_in, 1, 1), c_in, c_out))
        self.add_param("pointwise_bias", np.zeros(c_out, dtype=get_dtype()))

    @staticmethod
    def count_params(c_in: int, c_out: int, k: int = 3, bias: bool = True) -> int:
        return c_in * k * k + c_in * c_out + ((c_in + c_out) if bias else 0)

    def forward(self, x):
        p = self.params
        mid = depthwise_conv2d(x, p["depthwise"], p["depthwise_bias"], self.stride, self.pad)
        self._save((x, mid))
        return conv2d(mid, p["pointwise"], p["pointwise_bias"])

    def backward(self, dout):
        x, mid = self._pop()
        p = self.params
        dmid, dpw, dpb = conv2d_backward(dout, mid, p["pointwise"])
        dx, ddw, ddb = depthwise_conv2d_backward(dmid, x, p["depthwise"], self.stride, self.pad)
        self.grads["pointwise"] += dpw
        self.grads["pointwise_bias"] += dpb
        self.grads["depthwise"] += ddw
        self.grads["depthwise_bias"] += ddb
        return dx


class DiffusedMixDropout(Layer):
    """At each call, either elementwise or whole-channel inverted dropout (never both)."""

    def __init__(self, p_elem: float = 0.25, p_chan: float = 0.25, mix: float = 0.5, rng=None):
        super().__init__()
        self.p_elem = p_elem
        self.p_chan = p_chan
        self.mix = mix
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        if not self.training or (self.p_elem == 0 and self.p_chan == 0):
            self._save(None if not self.training else 1.0)
            return x
        if self.rng.random() < self.mix:
            p = self.p_elem
            keep = self.rng.random(x.shape) >= p
        else:
            p = self.p_chan
            keep = np.broadcast_to(self.rng.random((x.shape[0], 1, 1)) >= p, x.shape)
        mask = keep / (1.0 - p) if p < 1 else np.zeros(x.shape)
        mask = mask.astype(x.dtype)
        self._save(mask)
        return x * mask

    def backward(self, dout):
        if not self.training:
            return dout
        mask = self._pop()
        return dout * mask


class _Unit(Layer):
    """conv -> ReLU -> IN -> DMD."""

    def __init__(self, conv: Layer, channels: int, cfg: EncoderConfig, rng):
        super().__init__()
        self.conv = conv
        self.act = Activation("relu")
        self.norm = InstanceNorm2d(channels)
        self.drop = DiffusedMixDropout(cfg.dropout_elem, cfg.dropout_chan, cfg.dropout_mix, rng)

    def forward(self, x):
        return self.drop(self.norm(self.act(self.conv(x))))

    def backward(self, dout):
        return self.conv.backward(self.act.backward(self.norm.backward(self.drop.backward(dout))))


class _Sequence(Layer):
    def __init__(self):
        super().__init__()
        self.layers: list[Layer] = []

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class ConvBlock(_Sequence):
    def __init__(self, c_in: int, c_out: int, stride, cfg: EncoderConfig, rng):
        super().__init__()
        seq = [
            _Unit(Conv2d(c_in, c_out, 3, 1, rng=rng), c_out, cfg, rng),
            _Unit(Conv2d(c_out, c_out, 3, 1, rng=rng), c_out, cfg, rng),
        ]
        gate = [GatedConv2d(c_out, rng)]
        if cfg.gated_norm:
            gate.append(InstanceNorm2d(c_out))
        if cfg.gated_placement == "early":
            seq += gate
        seq.append(_Unit(Conv2d(c_out, c_out, 3, stride, rng=rng), c_out, cfg, rng))
        if cfg.gated_placement == "late":
            seq += gate
        self.layers = seq


class DSCBlock(_Sequence):
    def __init__(self, c_in: int, c_out: int, cfg: EncoderConfig, rng):
        super().__init__()
        self.layers = [
            _Unit(DepthwiseSeparableConv2d(c_in, c_out, 3, 1, rng), c_out, cfg, rng),
            _Unit(DepthwiseSeparableConv2d(c_out, c_out, 3, 1, rng), c_out, cfg, rng),
            _Unit(DepthwiseSeparableConv2d(c_out, c_out, 3, 1, rng), c_out, cfg, rng),
        ]

    @staticmethod
    def standard_equivalent_params(c_in: int, c_out: int, k: int = 3) -> int:
        """Parameters of the same block built from standard convolutions (plus IN)."""
        convs = (c_in * c_out + 2 * c_out * c_out) * k * k + 3 * c_out
        return convs + 3 * 2 * c_out


class Encoder(Layer):
    def __init__(self, cfg: EncoderConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        blocks: list[Layer] = []
        c = cfg.in_channels
        for ch, stride in zip(cfg.cb_channels, cfg.cb_strides):
            blocks.append(ConvBlock(c, ch, stride, cfg, rng))
            c = ch
        for ch in cfg.dscb_channels:
            blocks.append(DSCBlock(c, ch, cfg, rng))
            c = ch
        self.blocks = blocks

    def block_name(self, i: int) -> str:
        n_cb = len(self.cfg.cb_channels)
        return f"encoder block {i} ({'CB' if i < n_cb else 'DSCB'} {i if i < n_cb else i - n_cb})"

    def forward(self, x):
        residual = []
        with np.errstate(over="ignore", invalid="ignore"):
            for i, block in enumerate(self.blocks):
                y = block(x)
                res = y.shape == x.shape
                if res:
                    y = y + x
                residual.append(res)
                if not np.all(np.isfinite(y)):
                    raise NumericalInstabilityError(self.block_name(i))
                x = y
        self._save(residual)
        return x

    def backward(self, dout):
        residual = self._pop()
        for block, res in zip(reversed(self.blocks), reversed(residual)):
            d = block.backward(dout)
            dout = d + dout if res else d
        return dout

    def dscb_param_counts(self) -> list[tuple[int, int]]:
        """``(actual, standard-conv equivalent)`` parameter counts for each DSCB."""
        out = []
        c = self.cfg.cb_channels[-1] if self.cfg.cb_channels else self.cfg.in_channels
        for block, ch in zip(self.blocks[len(self.cfg.cb_channels):], self.cfg.dscb_channels):
            out.append((block.num_params(), DSCBlock.standard_equivalent_params(c, ch)))
            c = ch
        return out
