"""Overlapped grid plans, tile cropping and averaged merging.

Regular tiles are ``G x G`` windows on a stride of ``G / 2``; a flush tile is
appended on each axis when the size is not stride-aligned. When the plan has at
least two rows and two columns, one extra *corner-composite* tile gathers the
four ``G/2 x G/2`` image corners into its matching quadrants, so corner pixels
are covered twice as well.

Only the 512/256 case is pinned down by the method description; the placement
rule for other sizes is our generalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imagecore import as_image

Rect = tuple[int, int, int, int]  # (top, left, height, width)

REGULAR = "regular"
CORNER = "corner-composite"


@dataclass(frozen=True)
class Tile:
    kind: str
    rects: tuple[tuple[Rect, Rect], ...]  # (source-rect, tile-rect) pairs
    height: int
    width: int


@dataclass(frozen=True)
class GridPlan:
    image_h: int
    image_w: int
    tile_size: int
    stride: int
    tiles: tuple[Tile, ...]
    coverage: np.ndarray

    def __len__(self) -> int:
        return len(self.tiles)


def _origins(size: int, G: int, S: int) -> list[int]:
    origins = list(range(0, size - G + 1, S))
    if origins[-1] != size - G:
        origins.append(size - G)
    return origins


def plan_grids(h: int, w: int, G: int = 256, with_corner: bool = True) -> GridPlan:
    """Build the overlapped tiling of an ``h x w`` image with tile size ``G``.

    Images smaller than ``G`` on either side get a single whole-image tile.
    """
    if G <= 0:
        raise ValueError(f"tile size must be positive, got {G}")
    if G % 2:
        raise ValueError(f"tile size must be even, got {G}")
    if h <= 0 or w <= 0:
        raise ValueError(f"image size must be positive, got {h}x{w}")
    S = G // 2

    if h < G or w < G:
        whole = ((0, 0, h, w), (0, 0, h, w))
        tiles = (Tile(REGULAR, (whole,), h, w),)
        return GridPlan(h, w, G, S, tiles, np.ones((h, w), dtype=np.int64))

    rows, cols = _origins(h, G, S), _origins(w, G, S)
    tiles = [
        Tile(REGULAR, (((r, c, G, G), (0, 0, G, G)),), G, G)
        for r in rows
        for c in cols
    ]
    if with_corner and len(rows) >= 2 and len(cols) >= 2:
        tiles.append(
            Tile(
                CORNER,
                (
                    ((0, 0, S, S), (0, 0, S, S)),
                    ((0, w - S, S, S), (0, S, S, S)),
                    ((h - S, 0, S, S), (S, 0, S, S)),
                    ((h - S, w - S, S, S), (S, S, S, S)),
                ),
                G,
                G,
            )
        )

    coverage = np.zeros((h, w), dtype=np.int64)
    for tile in tiles:
        for (st, sl, sh, sw), _ in tile.rects:
            coverage[st : st + sh, sl : sl + sw] += 1
    return GridPlan(h, w, G, S, tuple(tiles), coverage)


def crop_tile(img: np.ndarray, tile: Tile, plan: GridPlan | None = None) -> np.ndarray:
    img = as_image(img)
    if plan is not None and img.shape[:2] != (plan.image_h, plan.image_w):
        raise ValueError(
            f"dimension mismatch: image {img.shape[:2]} vs plan {(plan.image_h, plan.image_w)}"
        )
    out = np.empty((tile.height, tile.width, img.shape[2]), dtype=img.dtype)
    for (st, sl, sh, sw), (tt, tl, _, _) in tile.rects:
        if st + sh > img.shape[0] or sl + sw > img.shape[1]:
            raise ValueError("dimension mismatch: tile source rect outside image")
        out[tt : tt + sh, tl : tl + sw] = img[st : st + sh, sl : sl + sw]
    return out


def crop_all(img: np.ndarray, plan: GridPlan) -> list[np.ndarray]:
    return [crop_tile(img, tile, plan) for tile in plan.tiles]


def merge_tiles(plan: GridPlan, tiles: Sequence[np.ndarray]) -> np.ndarray:
    """Average tile contributions per pixel.

    Sums run in plan order in extended precision, so the result does not
    depend on the order in which tiles were produced.
    """
    if len(tiles) != len(plan.tiles):
        raise ValueError(f"tile count mismatch: got {len(tiles)}, plan has {len(plan.tiles)}")
    channels = None
    acc = None
    for tile, data in zip(plan.tiles, tiles):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.shape[:2] != (tile.height, tile.width):
            raise ValueError(
                f"tile size mismatch: got {data.shape[:2]}, expected {(tile.height, tile.width)}"
            )
        if channels is None:
            channels = data.shape[2]
            acc = np.zeros((plan.image_h, plan.image_w, channels), dtype=np.longdouble)
        elif data.shape[2] != channels:
            raise ValueError("tile size mismatch: channel count differs between tiles")
        for (st, sl, sh, sw), (tt, tl, _, _) in tile.rects:
            acc[st : st + sh, sl : sl + sw] += data[tt : tt + sh, tl : tl + sw]
    merged = acc / plan.coverage[:, :, None]
    return merged.astype(np.float64)
