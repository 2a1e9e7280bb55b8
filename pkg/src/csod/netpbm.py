"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAX_DIM = 1 << 15


class NetpbmError(ValueError):
    pass


class BadMagicError(NetpbmError):
    pass


class DimensionError(NetpbmError):
    pass


class TruncatedImageError(NetpbmError):
    pass


def quantize(x):
    """Map [0,1] floats to bytes with round-half-up."""
    return np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def encode(tensor) -> bytes:
    x = np.asarray(tensor, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"can only write a single image, got batch shape {x.shape}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel (c,h,w) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    c, h, w = x.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + quantize(x.transpose(1, 2, 0)).tobytes()


def write_image(path, tensor):
    Path(path).write_bytes(encode(tensor))


def _header_tokens(data, path):
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            if len(tokens) == 0:
                raise BadMagicError(f"{path}: empty file, expected P5/P6 magic")
            raise TruncatedImageError(f"{path}: header truncated after {len(tokens)} fields")
        tokens.append(data[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise BadMagicError(f"{path}: bad magic {tokens[0][:8]!r}, expected P5 or P6")
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedImageError(f"{path}: missing whitespace after maxval")
    return tokens, pos + 1


def decode(data: bytes, path="<bytes>"):
    """Parse P5/P6 bytes into a (1, c, h, w) float64 tensor scaled by 1/255."""
    tokens, offset = _header_tokens(data, path)
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DimensionError(f"{path}: non-numeric header fields {tokens[1:]!r}") from None
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise DimensionError(f"{path}: dimensions {w}x{h} outside 1..{MAX_DIM}")
    if maxval != 255:
        raise DimensionError(f"{path}: maxval {maxval} unsupported, expected 255")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedImageError(f"{path}: payload truncated, {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float64) / 255.0)[None]


def read_image(path):
    return decode(Path(path).read_bytes(), path)
