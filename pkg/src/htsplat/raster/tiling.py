"""Per-tile splat lists keyed by a 16-bit tile id (no depth bits, no global sort)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core_math import ConfigError

MAX_TILES = 1 << 16


@dataclass
class TileList:
    tile_start: np.ndarray  # (n_tiles + 1,) CSR offsets
    tile_idx: np.ndarray  # (n_instances,) compacted splat indices
    keys: np.ndarray  # (n_instances,) uint16 tile id per instance
    tiles_x: int
    tiles_y: int
    tile_size: int

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def splats_in(self, tx, ty) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.tile_idx[self.tile_start[t]:self.tile_start[t + 1]]


def pixel_range(b, t, size):
    """Inclusive range of pixel indices whose centers ``i + 0.5`` lie in ``[b, t]``.

    Returns ``(lo, hi)`` clamped to ``[0, size - 1]``; ``lo > hi`` means no pixel.
    """
    lo = np.ceil(np.asarray(b) - 0.5)
    hi = np.floor(np.asarray(t) - 0.5)
    lo = np.clip(lo, 0, size).astype(np.int64)
    hi = np.clip(hi, -1, size - 1).astype(np.int64)
    return lo, hi


def build_tiles(b, t, width, height, tile_size=8, tiling=True) -> TileList:
    """Append every splat to each tile its box overlaps.

    ``b``/``t`` are ``(n, >=2)`` screen-space box corners of the surviving
    splats. Within a tile, splats stay in index order.
    """
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    n = b.shape[0]
    if not tiling:
        ts = max(width, height)
        tiles_x = tiles_y = 1
    else:
        ts = tile_size
        tiles_x = -(-width // ts)
        tiles_y = -(-height // ts)
    if tiles_x * tiles_y > MAX_TILES:
        raise ConfigError(f"{tiles_x * tiles_y} tiles exceed the 16-bit tile key range")
    x_lo, x_hi = pixel_range(b[:, 0], t[:, 0], width)
    y_lo, y_hi = pixel_range(b[:, 1], t[:, 1], height)
    covers = (x_lo <= x_hi) & (y_lo <= y_hi)
    tx0, tx1 = x_lo // ts, x_hi // ts
    ty0, ty1 = y_lo // ts, y_hi // ts
    nx = np.where(covers, tx1 - tx0 + 1, 0)
    ny = np.where(covers, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    splat = np.repeat(np.arange(n), counts)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]]) if n else np.zeros(0, np.int64)
    local = np.arange(total) - np.repeat(start, counts)
    nxr = np.repeat(nx, counts)
    tile_x = np.repeat(tx0, counts) + local % np.maximum(nxr, 1)
    tile_y = np.repeat(ty0, counts) + local // np.maximum(nxr, 1)
    keys = (tile_y * tiles_x + tile_x).astype(np.uint16)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    tile_idx = splat[order].astype(np.int64)
    tile_start = np.searchsorted(keys, np.arange(tiles_x * tiles_y + 1), side="left").astype(np.int64)
    return TileList(tile_start, tile_idx, keys, tiles_x, tiles_y, ts)
