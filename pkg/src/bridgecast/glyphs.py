"""Bundled 5x7 pixel-font digit bitmaps.

Keeps the synthetic bouncing-digit generator self-contained: no download,
no external archive.  An external glyph bank (.npy, [K, h, w] floats in
[0, 1]) can be supplied to the generator instead.
"""

from __future__ import annotations

import numpy as np

_FONT = [
    "01110 10001 10011 10101 11001 10001 01110",  # 0
    "00100 01100 00100 00100 00100 00100 01110",  # 1
    "01110 10001 00001 00010 00100 01000 11111",  # 2
    "11111 00010 00100 00010 00001 10001 01110",  # 3
    "00010 00110 01010 10010 11111 00010 00010",  # 4
    "11111 10000 11110 00001 00001 10001 01110",  # 5
    "00110 01000 10000 11110 10001 10001 01110",  # 6
    "11111 00001 00010 00100 01000 01000 01000",  # 7
    "01110 10001 10001 01110 10001 10001 01110",  # 8
    "01110 10001 10001 01111 00001 00010 01100",  # 9
]


def _parse(rows: str) -> np.ndarray:
    return np.array(
        [[float(c) for c in row] for row in rows.split()], dtype=np.float32
    )


DIGIT_GLYPHS: np.ndarray = np.stack([_parse(r) for r in _FONT])  # [10, 7, 5]
DIGIT_GLYPHS.setflags(write=False)


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    rows = np.floor(np.arange(size) * h / size).astype(int)
    cols = np.floor(np.arange(size) * w / size).astype(int)
    return img[np.ix_(rows, cols)]


def glyph_bank(digit_size: int, source: np.ndarray | None = None) -> np.ndarray:
    """Square glyphs at the requested size, [K, digit_size, digit_size] in [0, 1]."""
    if digit_size < 3:
        raise ValueError(f"digit_size must be >= 3, got {digit_size}")
    bank = DIGIT_GLYPHS if source is None else np.asarray(source, dtype=np.float32)
    if bank.ndim != 3:
        raise ValueError("glyph bank must be [K, h, w]")
    if bank.min() < 0.0 or bank.max() > 1.0:
        raise ValueError("glyph values must lie in [0, 1]")
    return np.stack([_resize_nearest(g, digit_size) for g in bank])
