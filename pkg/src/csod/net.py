"""Miniature U-shape salient-object-detection network.

Encoder: per stage two 3x3 conv+relu layers, then 2x2 max pooling (none
after the last stage).  Decoder: one level per encoder stage except the
first, coarse to fine, each a fire+SE block (or a plain 3x3 block) fed by
the encoder feature at that scale plus the upsampled level below.  Every
decoder level has a 1x1 prediction head whose logits are upsampled to the
input size; the final map is a learned 1x1 fusion of all side logits.

The optional edge branch taps encoder stage 2, predicts an edge map, and
adds its (channel-matched) feature to every side head at stage-2 resolution.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .blocks import (
    ISFCREM,
    BlockParamCount,
    FireConfig,
    PlainDecoderLevel,
    SEConfig,
    count_params,
    init_truncated_normal,
)
from .engine import (
    Add,
    BCELoss,
    ConcatChannels,
    Conv2d,
    Layer,
    MaxPool2x2,
    ReLU,
    ShapeError,
    Sigmoid,
    UpsampleNearest,
)

INIT_STD = 0.01


@dataclass(frozen=True)
class NetConfig:
    stages: int = 4
    stage_channels: tuple = (16, 32, 64, 128)
    decoder: str = "fire"
    se_enabled: bool = True
    edge_branch: bool = True
    input_size: int = 64
    squeeze_ratio: float = 0.25
    se_reduction: int = 4
    se_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.stages < 2:
            raise ValueError(f"net.stages must be >= 2, got {self.stages}")
        if len(self.stage_channels) != self.stages:
            raise ValueError(
                f"net.stage_channels has {len(self.stage_channels)} entries but net.stages={self.stages}"
            )
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"net.stage_channels must be strictly increasing, got {self.stage_channels}")
        if self.stage_channels[0] < 1:
            raise ValueError("net.stage_channels must be positive")
        if self.decoder not in ("fire", "plain"):
            raise ValueError(f"net.decoder must be 'fire' or 'plain', got {self.decoder!r}")
        step = 2 ** (self.stages - 1)
        if self.input_size < step or self.input_size % step:
            raise ValueError(f"net.input_size {self.input_size} is not divisible by 2^(stages-1) = {step}")
        if not 0 < self.squeeze_ratio <= 1:
            raise ValueError(f"net.squeeze_ratio must be in (0, 1], got {self.squeeze_ratio}")
        if self.decoder == "fire":
            for c in self.stage_channels[1:]:
                FireConfig.for_channels(c, c, self.squeeze_ratio)
                if self.se_enabled:
                    SEConfig(c, self.se_reduction)

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return NetConfig(**values)

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name}={v}")
        return out

    @classmethod
    def from_mapping(cls, values):
        """Build from string values keyed by field name; unknown keys raise KeyError."""
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in names:
                raise KeyError(key)
            kwargs[key] = _parse_field(key, str(raw).strip(), getattr(cls, key, None))
        return cls(**kwargs)


def _parse_field(key, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None


@dataclass
class ForwardOutputs:
    side_maps: list
    final_map: np.ndarray
    edge_map: np.ndarray | None = None

    def maps(self):
        out = list(self.side_maps) + [self.final_map]
        if self.edge_map is not None:
            out.append(self.edge_map)
        return out


class EncoderStage(Layer):
    def __init__(self, c_in, c_out, pool):
        self.conv1 = Conv2d(c_in, c_out, 3, padding=1)
        self.act1 = ReLU()
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1)
        self.act2 = ReLU()
        self.pool = MaxPool2x2() if pool else None

    def forward(self, x):
        feat = self.act2(self.conv2(self.act1(self.conv1(x))))
        return feat, (self.pool(feat) if self.pool is not None else None)

    def backward(self, g_feat, g_pooled=None):
        if g_pooled is not None:
            g_up = self.pool.backward(g_pooled)
            g_feat = g_up if g_feat is None else g_feat + g_up
        return self.conv1.backward(self.act1.backward(self.conv2.backward(self.act2.backward(g_feat))))


class SideHead(Layer):
    """1x1 conv to one channel, optionally after adding the edge feature."""

    def __init__(self, c_in, up_factor, edge_channels=None, edge_factor=1):
        if edge_channels is not None:
            self.to_edge_res = UpsampleNearest(edge_factor)
            self.edge_match = Conv2d(edge_channels, c_in, 1)
            self.edge_add = Add()
        else:
            self.to_edge_res = self.edge_match = self.edge_add = None
        self.conv = Conv2d(c_in, 1, 1)
        self.up = UpsampleNearest(up_factor)

    def forward(self, feat, edge_feat=None):
        if self.edge_match is not None:
            feat = self.edge_add(self.to_edge_res(feat), self.edge_match(edge_feat))
        return self.up(self.conv(feat))

    def backward(self, upstream):
        g = self.conv.backward(self.up.backward(upstream))
        if self.edge_match is None:
            return g, None
        g_feat, g_edge = self.edge_add.backward(g)
        return self.to_edge_res.backward(g_feat), self.edge_match.backward(g_edge)


class EdgeBranch(Layer):
    def __init__(self, channels):
        self.conv = Conv2d(channels, channels, 3, padding=1)
        self.act = ReLU()
        self.head = Conv2d(channels, 1, 1)
        self.up = UpsampleNearest(2)
        self.out = Sigmoid()

    def forward(self, x):
        feat = self.act(self.conv(x))
        return feat, self.out(self.up(self.head(feat)))

    def backward(self, g_feat, g_map):
        if g_map is not None:
            g_feat = g_feat + self.head.backward(self.up.backward(self.out.backward(g_map)))
        return self.conv.backward(self.act.backward(g_feat))


class SODNet(Layer):
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        ch = cfg.stage_channels
        self.encoder = [
            EncoderStage(3 if i == 0 else ch[i - 1], ch[i], pool=i < cfg.stages - 1) for i in range(cfg.stages)
        ]
        # decoder[j] serves encoder stage k = stages-1-j (coarse -> fine), k >= 1
        self.levels = list(range(cfg.stages - 1, 0, -1))
        self.decoder = [self._make_level(k) for k in self.levels]
        self.edge = EdgeBranch(ch[1]) if cfg.edge_branch else None
        self.heads = [
            SideHead(
                ch[k],
                up_factor=2 if cfg.edge_branch else 2 ** k,
                edge_channels=ch[1] if cfg.edge_branch else None,
                edge_factor=2 ** (k - 1),
            )
            for k in self.levels
        ]
        self.side_out = [Sigmoid() for _ in self.levels]
        self.concat = ConcatChannels()
        self.fuse = Conv2d(len(self.levels), 1, 1)
        self.final_out = Sigmoid()
        for i, p in enumerate(self.parameters()):
            p.id = i
        self._shape = None

    def _make_level(self, k):
        cfg, ch = self.cfg, self.cfg.stage_channels
        below = ch[k + 1] if k < cfg.stages - 1 else None
        if cfg.decoder == "plain":
            return PlainDecoderLevel(ch[k], ch[k], c_below=below)
        se = SEConfig(ch[k], cfg.se_reduction) if cfg.se_enabled else None
        fire = FireConfig.for_channels(ch[k], ch[k], cfg.squeeze_ratio)
        return ISFCREM(fire, se, c_below=below, se_residual=cfg.se_residual)

    # -- accounting --------------------------------------------------------

    def encoder_params(self) -> BlockParamCount:
        return sum((count_params(s) for s in self.encoder), BlockParamCount(0, 0))

    def decoder_params(self) -> BlockParamCount:
        return sum((count_params(d) for d in self.decoder), BlockParamCount(0, 0))

    def block_table(self):
        """(name, BlockParamCount) rows covering every parameter exactly once."""
        rows = [(f"encoder.stage{i + 1}", count_params(s)) for i, s in enumerate(self.encoder)]
        rows += [(f"decoder.level{k + 1}", count_params(d)) for k, d in zip(self.levels, self.decoder)]
        if self.edge is not None:
            rows.append(("edge_branch", count_params(self.edge)))
        rows += [(f"head.level{k + 1}", count_params(h)) for k, h in zip(self.levels, self.heads)]
        rows.append(("fuse", count_params(self.fuse)))
        return rows

    # -- forward / backward ----------------------------------------------

    def forward(self, images):
        cfg = self.cfg
        expected = (3, cfg.input_size, cfg.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"images must be shaped (n,{expected[0]},{expected[1]},{expected[2]}), got {images.shape}")
        self._shape = images.shape
        feats = []
        h = images
        for stage in self.encoder:
            feat, h = stage(h)
            feats.append(feat)

        dec = {}
        below = None
        for k, level in zip(self.levels, self.decoder):
            below = level(feats[k], below) if below is not None else level(feats[k])
            dec[k] = below

        edge_feat = edge_map = None
        if self.edge is not None:
            edge_feat, edge_map = self.edge(feats[1])

        logits = [head(dec[k], edge_feat) for k, head in zip(self.levels, self.heads)]
        side_maps = [act(z) for act, z in zip(self.side_out, logits)]
        final_map = self.final_out(self.fuse(self.concat(*logits)))
        return ForwardOutputs(side_maps, final_map, edge_map)

    def backward(self, grads: ForwardOutputs):
        cfg = self.cfg
        self._require_cache(self._shape)
        g_logits = self.concat.backward(self.fuse.backward(self.final_out.backward(grads.final_map)))
        g_logits = [gl + act.backward(gs) for gl, act, gs in zip(g_logits, self.side_out, grads.side_maps)]

        g_dec = {}
        g_edge_feat = None
        for k, head, gz in zip(self.levels, self.heads, g_logits):
            g_dec[k], ge = head.backward(gz)
            if ge is not None:
                g_edge_feat = ge if g_edge_feat is None else g_edge_feat + ge

        g_feats = [None] * cfg.stages
        for k, level in zip(reversed(self.levels), reversed(self.decoder)):
            g_skip, g_below = level.backward(g_dec[k])
            g_feats[k] = g_skip
            if g_below is not None:
                g_dec[k + 1] = g_dec[k + 1] + g_below

        if self.edge is not None:
            g1 = self.edge.backward(g_edge_feat, grads.edge_map)
            g_feats[1] = g_feats[1] + g1

        g_pooled = None
        for stage, g_feat in zip(reversed(self.encoder), reversed(g_feats)):
            g_pooled = stage.backward(g_feat, g_pooled)
        return g_pooled


def build_network(cfg: NetConfig, seed=0, init_std=INIT_STD) -> SODNet:
    net = SODNet(cfg)
    init_truncated_normal(net, np.random.default_rng(seed), std=init_std)
    return net


class TotalLoss:
    """Sum of unit-weighted BCE terms over side maps, the final map and,
    when present, the edge map."""

    def __init__(self):
        self._terms = None

    def forward(self, outputs: ForwardOutputs, mask, edge=None):
        shape = outputs.final_map.shape
        if mask.shape != shape:
            raise ShapeError(f"mask shape {mask.shape} does not match prediction shape {shape}")
        if outputs.edge_map is not None:
            if edge is None:
                raise ValueError("edge target required when the edge branch is enabled")
            if edge.shape != outputs.edge_map.shape:
                raise ShapeError(f"edge shape {edge.shape} does not match edge prediction {outputs.edge_map.shape}")
        side = [(BCELoss(), m, mask) for m in outputs.side_maps]
        final = (BCELoss(), outputs.final_map, mask)
        edge_term = (BCELoss(), outputs.edge_map, edge) if outputs.edge_map is not None else None
        self._terms = (side, final, edge_term)
        total = sum(l.forward(p, t) for l, p, t in side)
        total += final[0].forward(final[1], final[2])
        if edge_term is not None:
            total += edge_term[0].forward(edge_term[1], edge_term[2])
        return float(total)

    __call__ = forward

    def backward(self) -> ForwardOutputs:
        if self._terms is None:
            raise RuntimeError("TotalLoss.backward called before forward")
        side, final, edge_term = self._terms
        return ForwardOutputs(
            [l.backward() for l, _, _ in side],
            final[0].backward(),
            edge_term[0].backward() if edge_term is not None else None,
        )


def total_loss(outputs, mask, edge=None):
    return TotalLoss().forward(outputs, mask, edge)


def loss_and_grad(net: SODNet, images, mask, edge=None):
    """One forward/backward pass; parameter grads are accumulated into the net."""
    loss_fn = TotalLoss()
    loss = loss_fn(net(images), mask, edge)
    net.backward(loss_fn.backward())
    return loss


def decoder_param_ratio(cfg: NetConfig) -> float:
    """Decoder parameters of ``cfg`` over those of its plain-conv twin."""
    ours = SODNet(cfg).decoder_params().total
    plain = SODNet(cfg.replace(decoder="plain")).decoder_params().total
    return ours / plain


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CSOD"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ParamShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _encode(net: SODNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    text = ("\n".join(net.cfg.to_lines()) + "\n").encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    params = net.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        buf.write(struct.pack("<IB", p.id, p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(p.value.astype("<f8").tobytes())
    return buf.getvalue()


def checkpoint_size(net: SODNet) -> int:
    """Exact byte size ``save_checkpoint`` would write for ``net``."""
    header = len(MAGIC) + 2 + 4 + len(("\n".join(net.cfg.to_lines()) + "\n").encode()) + 4
    return header + sum(5 + 4 * p.value.ndim + 8 * p.size for p in net.parameters())


def save_checkpoint(net: SODNet, path):
    Path(path).write_bytes(_encode(net))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> SODNet:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    (text_len,) = r.unpack("<I", "config length")
    text = r.take(text_len, "config").decode()
    values = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    try:
        cfg = NetConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid network config ({exc})") from None
    net = SODNet(cfg)
    params = net.parameters()
    (count,) = r.unpack("<I", "parameter count")
    if count != len(params):
        raise ParamShapeError(f"{path}: checkpoint holds {count} parameters, config builds {len(params)}")
    for p in params:
        pid, rank = r.unpack("<IB", "parameter header")
        dims = r.unpack(f"<{rank}I", "parameter dims")
        if pid != p.id or tuple(dims) != p.shape:
            raise ParamShapeError(
                f"{path}: parameter record {pid} has shape {tuple(dims)}, expected id {p.id} shape {p.shape}"
            )
        raw = r.take(8 * p.size, f"parameter {pid} values")
        p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after last parameter")
    return net
