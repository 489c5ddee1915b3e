"""Binary netpbm frames (P5 grayscale, P6 RGB) and ordered frame sequences."""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor


class NetpbmError(ValueError):
    """Base class for netpbm decode failures."""


class BadMagicError(NetpbmError):
    pass


class BadHeaderError(NetpbmError):
    pass


class MaxvalError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


class FrameSourceError(OSError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    """Decoded image, pixels in [0, 1] shaped ``(height, width, channels)``."""

    pixels: np.ndarray
    index: int = 0
    label: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or 0 in px.shape:
            raise ValueError(f"frame pixels must be HxWx1 or HxWx3, got {px.shape}")
        if not (np.all(px >= 0.0) and np.all(px <= 1.0)):
            raise ValueError("frame pixels must lie in [0, 1]")
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        px = np.array(px, order="C")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


_WHITESPACE = b" \t\r\n\v\f"


def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos >= n:
            raise BadHeaderError("header ends prematurely")
        if buf[pos] == ord("#"):
            end = buf.find(b"\n", pos)
            pos = n if end < 0 else end + 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        tokens.append(buf[start:pos])
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise BadHeaderError("header must end with a single whitespace byte")
    return tokens, pos + 1


def parse_netpbm(data: bytes, *, index: int = 0, label: Optional[str] = None) -> Frame:
    """Decode a binary P5/P6 image with maxval <= 255."""
    data = bytes(data)
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise BadMagicError(f"unsupported netpbm magic {magic!r}")
    tokens, offset = _header_tokens(data[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise BadHeaderError(f"non-numeric header fields {tokens!r}") from None
    if width < 1 or height < 1:
        raise BadHeaderError(f"bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise MaxvalError(f"maxval {maxval} outside 1..255")
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedError(f"pixel payload has {len(payload)} bytes, expected {need}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.max() > maxval:
        raise NetpbmError(f"sample value {int(raw.max())} exceeds maxval {maxval}")
    pixels = raw.astype(np.float64).reshape(height, width, channels) / maxval
    return Frame(pixels, index=index, label=label)


def _to_bytes(values) -> bytes:
    # round half up
    return np.floor(np.asarray(values) * 255.0 + 0.5).astype(np.uint8).tobytes()


def encode_ppm(frame: Frame) -> bytes:
    """Binary P6, maxval 255. Grayscale frames are replicated to RGB."""
    px = frame.pixels
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    header = b"P6 %d %d 255\n" % (frame.width, frame.height)
    return header + _to_bytes(px)


def encode_pgm(frame: Frame) -> bytes:
    """Binary P5, maxval 255. RGB frames are reduced by channel mean."""
    px = frame.pixels
    if px.shape[2] == 3:
        px = px.mean(axis=2, keepdims=True)
    header = b"P5 %d %d 255\n" % (frame.width, frame.height)
    return header + _to_bytes(px)


@dataclass
class FrameSource:
    """Single-consumer iterator over netpbm files in locator order."""

    locators: list
    cursor: int = field(default=0)

    def __len__(self):
        return len(self.locators)

    def __iter__(self) -> Iterator[Frame]:
        while self.cursor < len(self.locators):
            path = self.locators[self.cursor]
            index = self.cursor
            self.cursor += 1
            yield read_frame(path, index=index)

    def reset(self):
        self.cursor = 0


def read_frame(path, index: int = 0) -> Frame:
    name = os.path.basename(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FrameSourceError(f"{name}: {exc.strerror or exc}") from exc
    try:
        return parse_netpbm(data, index=index, label=name)
    except NetpbmError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def open_sequence(directory, pattern: str = "*.p[gpn]m") -> FrameSource:
    """Files in ``directory`` matching ``pattern``, sorted lexicographically."""
    try:
        names = os.listdir(directory)
    except OSError as exc:
        raise FrameSourceError(f"cannot read frame directory {directory}: {exc.strerror or exc}") from exc
    names = sorted(n for n in names if fnmatch.fnmatchcase(n, pattern)
                   and os.path.isfile(os.path.join(directory, n)))
    return FrameSource([os.path.join(directory, n) for n in names])


def to_tensor(frame: Frame, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resample: source index ``floor(i * src / dst)`` per axis."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    rows = (np.arange(target_h) * frame.height) // target_h
    cols = (np.arange(target_w) * frame.width) // target_w
    return Tensor(frame.pixels[rows][:, cols])
