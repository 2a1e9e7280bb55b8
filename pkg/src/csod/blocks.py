"""Decoder building blocks: fire module, squeeze-and-excitation, the fused
fire+SE decoder block (ISFCREM) and the plain 3x3 baseline it replaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    Add,
    ChannelScale,
    ConcatChannels,
    Conv2d,
    GlobalAvgPool,
    Layer,
    Linear,
    ReLU,
    ShapeError,
    Sigmoid,
    UpsampleNearest,
)


@dataclass(frozen=True)
class FireConfig:
    c_in: int
    squeeze: int
    expand1: int
    expand3: int

    def __post_init__(self):
        if self.squeeze < 1:
            raise ValueError(f"fire squeeze width must be >= 1, got {self.squeeze}")
        if self.squeeze > self.c_in:
            raise ValueError(f"fire squeeze width {self.squeeze} exceeds input channels {self.c_in}")
        if self.expand1 != self.expand3:
            raise ValueError(f"fire expand paths must be 1:1, got {self.expand1} and {self.expand3}")
        if self.expand1 < 1:
            raise ValueError("fire expand width must be >= 1")

    @property
    def c_out(self):
        return self.expand1 + self.expand3

    @classmethod
    def for_channels(cls, c_in, c_out, squeeze_ratio=0.25):
        """Fire config producing ``c_out`` channels with squeeze = c_out * ratio."""
        if c_out % 2:
            raise ValueError(f"fire output channels must be even, got {c_out}")
        s = max(1, int(round(c_out * squeeze_ratio)))
        return cls(c_in, min(s, c_in), c_out // 2, c_out // 2)


@dataclass(frozen=True)
class SEConfig:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError(f"SE reduction must be >= 1, got {self.reduction}")
        if self.channels // self.reduction < 1:
            raise ValueError(f"SE bottleneck {self.channels}/{self.reduction} is below 1")

    @property
    def hidden(self):
        return self.channels // self.reduction


@dataclass(frozen=True)
class BlockParamCount:
    weights: int
    biases: int

    @property
    def total(self):
        return self.weights + self.biases

    def __add__(self, other):
        return BlockParamCount(self.weights + other.weights, self.biases + other.biases)


def count_params(block: Layer | None) -> BlockParamCount:
    if block is None:
        return BlockParamCount(0, 0)
    w = b = 0
    for p in block.parameters():
        if p.kind == "bias":
            b += p.size
        else:
            w += p.size
    return BlockParamCount(w, b)


# closed-form counts, kept independent of the layer classes

def fire_param_count(cfg: FireConfig) -> BlockParamCount:
    s, e1, e3 = cfg.squeeze, cfg.expand1, cfg.expand3
    return BlockParamCount(cfg.c_in * s + s * e1 + 9 * s * e3, s + e1 + e3)


def se_param_count(cfg: SEConfig) -> BlockParamCount:
    c, h = cfg.channels, cfg.hidden
    return BlockParamCount(c * h + h * c, h + c)


def plain_param_count(c_in, c_out) -> BlockParamCount:
    return BlockParamCount(9 * c_in * c_out, c_out)


def conv1x1_param_count(c_in, c_out) -> BlockParamCount:
    return BlockParamCount(c_in * c_out, c_out)


def _check_channels(x, expected, name):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{name} expects {expected} input channels, got shape {x.shape}")


class Fire(Layer):
    """Squeeze 1x1 -> relu -> [expand 1x1 | expand 3x3] -> relu."""

    def __init__(self, cfg: FireConfig):
        self.cfg = cfg
        self.squeeze = Conv2d(cfg.c_in, cfg.squeeze, 1)
        self.squeeze_act = ReLU()
        self.expand1 = Conv2d(cfg.squeeze, cfg.expand1, 1)
        self.expand3 = Conv2d(cfg.squeeze, cfg.expand3, 3, padding=1)
        self.concat = ConcatChannels()
        self.out_act = ReLU()

    def forward(self, x):
        _check_channels(x, self.cfg.c_in, "fire")
        s = self.squeeze_act(self.squeeze(x))
        return self.out_act(self.concat(self.expand1(s), self.expand3(s)))

    def backward(self, upstream):
        g1, g3 = self.concat.backward(self.out_act.backward(upstream))
        gs = self.expand1.backward(g1) + self.expand3.backward(g3)
        return self.squeeze.backward(self.squeeze_act.backward(gs))


class SqueezeExcite(Layer):
    """Channel attention: gap -> fc -> relu -> fc -> sigmoid -> scale.

    With ``residual=True`` the scaled map is added back onto the input, so
    the per-channel multiplier is ``1 + s`` with ``s`` in (0, 1).
    """

    def __init__(self, cfg: SEConfig, residual=True):
        self.cfg = cfg
        self.residual = residual
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(cfg.channels, cfg.hidden)
        self.act1 = ReLU()
        self.fc2 = Linear(cfg.hidden, cfg.channels)
        self.gate = Sigmoid()
        self.scale = ChannelScale()
        self._shape = None

    def forward(self, x):
        _check_channels(x, self.cfg.channels, "SE")
        n, c = x.shape[:2]
        self._shape = x.shape
        d = self.pool(x).reshape(n, c)
        s = self.gate(self.fc2(self.act1(self.fc1(d)))).reshape(n, c, 1, 1)
        out = self.scale(x, s)
        return out + x if self.residual else out

    def backward(self, upstream):
        n, c = self._require_cache(self._shape)[:2]
        gx, gs = self.scale.backward(upstream)
        gd = self.fc1.backward(self.act1.backward(self.fc2.backward(self.gate.backward(gs.reshape(n, c)))))
        gx = gx + self.pool.backward(gd.reshape(n, c, 1, 1))
        return gx + upstream if self.residual else gx


class PlainBlock(Layer):
    """relu(conv3x3, pad 1): the uncompressed decoder convolution."""

    def __init__(self, c_in, c_out):
        self.c_in, self.c_out = c_in, c_out
        self.conv = Conv2d(c_in, c_out, 3, padding=1)
        self.act = ReLU()

    def forward(self, x):
        _check_channels(x, self.c_in, "plain block")
        return self.act(self.conv(x))

    def backward(self, upstream):
        return self.conv.backward(self.act.backward(upstream))


class TopDownFusion(Layer):
    """skip + conv1x1(upsample2x(below)); the 1x1 conv matches channel counts."""

    def __init__(self, c_below, c_skip):
        self.match = Conv2d(c_below, c_skip, 1)
        self.up = UpsampleNearest(2)
        self.add = Add()

    def forward(self, skip, below):
        up = self.up(below)
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"upsampled decoder feature {up.shape} does not match skip feature {skip.shape} spatially"
            )
        return self.add(skip, self.match(up))

    def backward(self, upstream):
        g_skip, g_match = self.add.backward(upstream)
        return g_skip, self.up.backward(self.match.backward(g_match))


class DecoderLevel(Layer):
    """One decoder level: optional top-down fusion followed by a body block.

    ``c_below=None`` marks the coarsest level, which has nothing to fuse.
    """

    body: Layer

    def __init__(self, c_skip, c_below=None):
        self.c_skip = c_skip
        self.fusion = TopDownFusion(c_below, c_skip) if c_below is not None else None

    def forward(self, skip, below=None):
        if (below is None) != (self.fusion is None):
            raise ValueError("decoder level called with the wrong number of inputs")
        fused = skip if self.fusion is None else self.fusion(skip, below)
        return self.body(fused)

    def backward(self, upstream):
        g = self.body.backward(upstream)
        if self.fusion is None:
            return g, None
        return self.fusion.backward(g)


class ISFCREM(DecoderLevel):
    """Fused fire + squeeze-and-excitation decoder block."""

    def __init__(self, fire_cfg: FireConfig, se_cfg: SEConfig | None, c_below=None, se_residual=True):
        if se_cfg is not None and se_cfg.channels != fire_cfg.c_out:
            raise ValueError(f"SE channels {se_cfg.channels} != fire output channels {fire_cfg.c_out}")
        super().__init__(fire_cfg.c_in, c_below)
        self.fire = Fire(fire_cfg)
        self.se = SqueezeExcite(se_cfg, residual=se_residual) if se_cfg is not None else None
        self.body = _Sequence([self.fire] + ([self.se] if self.se is not None else []))

    @property
    def c_out(self):
        return self.fire.cfg.c_out


class PlainDecoderLevel(DecoderLevel):
    def __init__(self, c_skip, c_out, c_below=None):
        super().__init__(c_skip, c_below)
        self.body = PlainBlock(c_skip, c_out)

    @property
    def c_out(self):
        return self.body.c_out


class _Sequence(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, upstream):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream


def init_truncated_normal(layer: Layer, rng: np.random.Generator, std=0.01):
    """Weights ~ N(0, std) resampled beyond 2 std; biases zero."""
    for p in layer.parameters():
        if p.kind == "bias":
            p.value[...] = 0.0
        else:
            p.value[...] = truncated_normal(rng, p.shape, std)


def truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std
