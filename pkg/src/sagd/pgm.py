"""Binary 8-bit PGM (P5) reading and writing."""

from __future__ import annotations

import re

import numpy as np

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a P5 image with ``maxval <= 255`` into a ``uint8`` array ``(H, W)``."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ValueError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError("malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise ValueError("only 8-bit PGM images with positive size are supported")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos) \
        if len(data) - pos >= width * height else None
    if pixels is None:
        raise ValueError("truncated PGM pixel data")
    return pixels.reshape(height, width).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def to_unit_range(pixels):
    """Map 8-bit intensities to ``[-1, 1]`` via ``x / 127.5 - 1``."""
    return np.asarray(pixels, dtype=float) / 127.5 - 1.0
