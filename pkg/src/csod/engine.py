"""Dense float64 tensor engine with explicit per-layer forward/backward rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, laid out as
(n, c, h, w).  Trainable state lives in :class:`Param`, which pairs a value
array with a same-shaped gradient buffer.  Every layer caches what it needs
during ``forward`` and consumes that cache in ``backward``; gradients for
parameters are accumulated (added), never overwritten, so several
forward/backward cycles can be summed before an optimizer step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
BCE_EPS = 1e-7

_param_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardBeforeForward(RuntimeError):
    """Raised when ``backward`` is called without a retained forward pass."""


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    kind: str = "weight"
    id: int = field(default_factory=lambda: next(_param_ids))

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Layer:
    """Base class.  Parameters and sub-layers are discovered from attributes
    in assignment order, which makes parameter ordering deterministic."""

    def parameters(self) -> list[Param]:
        params = []
        seen = set()

        def visit(obj):
            if isinstance(obj, Param):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    params.append(obj)
            elif isinstance(obj, Layer):
                for p in obj.parameters():
                    visit(p)
            elif isinstance(obj, (list, tuple)):
                for item in obj:
                    visit(item)

        for value in vars(self).values():
            visit(value)
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _require_cache(self, cache):
        if cache is None:
            raise BackwardBeforeForward(f"{type(self).__name__}.backward called before forward")
        return cache


def _check_rank4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n,c,h,w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # rows ordered (n, oh, ow); columns ordered (c, kh, kw) to match weight.reshape(co, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (n,c_in,h,w) with ``weight`` (c_out,c_in,kh,kw)."""
    out, _ = _conv2d_forward(x, weight, bias, stride, padding)
    return out


def _conv2d_forward(x, weight, bias, stride, padding):
    _check_rank4(x)
    if weight.ndim != 4:
        raise ShapeError(f"weight must be rank-4 (c_out,c_in,kh,kw), got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0 (got stride={stride}, padding={padding})")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input shape {x.shape} does not match weight shape {weight.shape} (c_in {c} != {ci})")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match weight shape {weight.shape}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"non-positive output size {oh}x{ow} for input shape {x.shape}, weight shape {weight.shape}, "
            f"stride {stride}, padding {padding}"
        )
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = cols @ weight.reshape(co, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, bias=True):
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = Param(np.zeros((c_out, c_in, kernel_size, kernel_size)), kind="weight")
        self.bias = Param(np.zeros(c_out), kind="bias") if bias else None
        self._cache = None

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        out, cols = _conv2d_forward(x, self.weight.value, b, self.stride, self.padding)
        self._cache = (x.shape, cols, out.shape)
        return out

    def backward(self, upstream):
        in_shape, cols, out_shape = self._require_cache(self._cache)
        if upstream.shape != out_shape:
            raise ShapeError(f"upstream shape {upstream.shape} != forward output shape {out_shape}")
        n, c, h, w = in_shape
        co, ci, kh, kw = self.weight.shape
        _, _, oh, ow = out_shape
        gm = upstream.transpose(0, 2, 3, 1).reshape(-1, co)
        self.weight.grad += (gm.T @ cols).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += gm.sum(axis=0)
        dcols = gm @ self.weight.value.reshape(co, -1)
        if kh == 1 and kw == 1 and self.stride == 1 and self.padding == 0:
            return np.ascontiguousarray(dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        dcols = dcols.reshape(n, oh, ow, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        p, s = self.padding, self.stride
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w])


# ---------------------------------------------------------------------------
# Pointwise activations
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return relu(x)  # np.maximum keeps NaN visible to the caller

    def backward(self, upstream):
        mask = self._require_cache(self._mask)
        return np.where(mask, upstream, 0.0)


class Sigmoid(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x):
        self._out = sigmoid(x)
        return self._out

    def backward(self, upstream):
        s = self._require_cache(self._out)
        return upstream * s * (1.0 - s)


def activation(kind):
    """Build a pointwise activation layer by name (``relu`` or ``sigmoid``)."""
    try:
        return {"relu": ReLU, "sigmoid": Sigmoid}[kind]()
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

class MaxPool2x2(Layer):
    """2x2/stride-2 max pooling.  Ties go to the first element in row-major
    order within the window."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        _check_rank4(x)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial size, got shape {x.shape}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def argmax(self):
        """Window-local argmax (0..3, row-major) from the last forward pass."""
        return self._require_cache(self._cache)[1]

    def backward(self, upstream):
        shape, idx = self._require_cache(self._cache)
        n, c, h, w = shape
        g = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(g, idx[..., None], upstream[..., None], axis=-1)
        return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def maxpool2x2(x):
    pool = MaxPool2x2()
    out = pool.forward(x)
    return out, pool.argmax()


def upsample_nearest(x, factor=2):
    _check_rank4(x)
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest2x(x):
    return upsample_nearest(x, 2)


def avg_pool(x, factor=2):
    """Mean over non-overlapping ``factor`` x ``factor`` blocks."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


class UpsampleNearest(Layer):
    def __init__(self, factor=2):
        if factor < 1:
            raise ValueError(f"upsampling factor must be >= 1, got {factor}")
        self.factor = factor
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return upsample_nearest(x, self.factor)

    def backward(self, upstream):
        n, c, h, w = self._require_cache(self._shape)
        f = self.factor
        if f == 1:
            return upstream
        return upstream.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        _check_rank4(x)
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, upstream):
        n, c, h, w = self._require_cache(self._shape)
        return np.broadcast_to(upstream / (h * w), (n, c, h, w)).copy()


def global_avg_pool(x):
    return GlobalAvgPool().forward(x)


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

class Linear(Layer):
    """Affine map on rows: ``y = x @ W.T + b`` with W shaped (out, in)."""

    def __init__(self, in_features, out_features):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Param(np.zeros((out_features, in_features)), kind="weight")
        self.bias = Param(np.zeros(out_features), kind="bias")
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"input shape {x.shape} does not match weight shape {self.weight.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, upstream):
        x = self._require_cache(self._x)
        self.weight.grad += upstream.T @ x
        self.bias.grad += upstream.sum(axis=0)
        return upstream @ self.weight.value


def linear(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"input shape {x.shape} does not match weight shape {weight.shape} / bias shape {bias.shape}")
    return x @ weight.T + bias


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

class ConcatChannels(Layer):
    def __init__(self):
        self._split = None

    def forward(self, *xs):
        for x in xs:
            _check_rank4(x)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"cannot concatenate shapes {ref} and {x.shape} along channels")
        self._split = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, upstream):
        split = self._require_cache(self._split)
        return tuple(np.ascontiguousarray(g) for g in np.split(upstream, split, axis=1))


def concat_channels(a, b):
    return ConcatChannels().forward(a, b)


class ChannelScale(Layer):
    """Multiply each (n, c) plane of ``x`` by ``s[n, c, 0, 0]``."""

    def __init__(self):
        self._cache = None

    def forward(self, x, s):
        _check_rank4(x)
        if s.shape != (x.shape[0], x.shape[1], 1, 1):
            raise ShapeError(f"scale shape {s.shape} does not match input shape {x.shape}; expected (n,c,1,1)")
        self._cache = (x, s)
        return x * s

    def backward(self, upstream):
        x, s = self._require_cache(self._cache)
        return upstream * s, (upstream * x).sum(axis=(2, 3), keepdims=True)


def channel_scale(x, s):
    return ChannelScale().forward(x, s)


class Add(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
        self._shape = a.shape
        return a + b

    def backward(self, upstream):
        self._require_cache(self._shape)
        return upstream, upstream


def add(a, b):
    return Add().forward(a, b)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

class BCELoss(Layer):
    """Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""

    def __init__(self, eps=BCE_EPS):
        self.eps = eps
        self._cache = None

    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
        if np.any(target < 0.0) or np.any(target > 1.0):
            raise ValueError("bce_loss target values must lie in [0, 1]")
        p = np.clip(pred, self.eps, 1.0 - self.eps)
        loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
        self._cache = (pred, p, target)
        return float(loss)

    def backward(self, upstream=1.0):
        pred, p, t = self._require_cache(self._cache)
        inside = (pred >= self.eps) & (pred <= 1.0 - self.eps)
        g = (p - t) / (p * (1.0 - p)) / p.size
        return np.where(inside, g, 0.0) * upstream


def bce_loss(pred, target, eps=BCE_EPS):
    return BCELoss(eps).forward(pred, target)
