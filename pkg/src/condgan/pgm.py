"""Binary PGM (P5) writing and parsing, plus the sample-grid layout.

Grids place one conditioning class per row and one sample per column, each
cell a square image tile, with 2-pixel black gutters between and around the
cells. Pixel bytes are round(value * 255) of generator outputs in [0, 1].
"""

from __future__ import annotations

import math

import numpy as np

from .checkpoint import atomic_write_bytes
from .errors import ConfigError, DataFormatError

GUTTER = 2


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a 2-d uint8 array as binary PGM with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ConfigError(f"PGM image must be 2-d uint8, got {image.shape} {image.dtype}")
    h, w = image.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def parse_pgm(data: bytes) -> np.ndarray:
    """Parse binary PGM bytes back into a 2-d uint8 array."""
    if not data.startswith(b"P5"):
        raise DataFormatError(f"not a binary PGM: starts with {data[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos: pos + 1].isspace():
            pos += 1
        if data[pos: pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos: pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"expected maxval 255, found {maxval}")
    body = data[pos:]
    if len(body) != width * height:
        raise DataFormatError(
            f"PGM body has {len(body)} bytes, expected {width * height}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def grid_dimensions(n_rows: int, n_cols: int, cell: int) -> tuple[int, int]:
    height = n_rows * cell + (n_rows + 1) * GUTTER
    width = n_cols * cell + (n_cols + 1) * GUTTER
    return height, width


def sample_grid(samples: np.ndarray) -> np.ndarray:
    """Assemble (rows, cols, d) samples in [0, 1] into one grid image.

    Each sample's d values must form a square cell (d a perfect square).
    """
    if samples.ndim != 3:
        raise ConfigError(f"expected (rows, cols, d) samples, got {samples.shape}")
    n_rows, n_cols, d = samples.shape
    cell = int(round(math.sqrt(d)))
    if cell * cell != d:
        raise ConfigError(f"sample width {d} is not a perfect square")
    height, width = grid_dimensions(n_rows, n_cols, cell)
    grid = np.zeros((height, width), dtype=np.uint8)
    tiles = np.clip(np.rint(samples * 255.0), 0, 255).astype(np.uint8)
    for r in range(n_rows):
        top = GUTTER + r * (cell + GUTTER)
        for c in range(n_cols):
            left = GUTTER + c * (cell + GUTTER)
            grid[top: top + cell, left: left + cell] = tiles[r, c].reshape(cell, cell)
    return grid
