"""Tiled full-scene inference.

Tiles overlap: each network output keeps only its clean centre, dropping the
``edge_trim`` border whose values depend on where the tile edge falls.
Window origins sit on the network's pooling lattice (multiples of
``2**depth``) so every pixel is computed under the same alignment whatever
the tile layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from petrel.raster import Raster, reflect_pad
from petrel.unet import UNetConfig, forward


@dataclass(frozen=True)
class Tile:
    origin: tuple[int, int]              # network output window top-left, scene coords
    write: tuple[int, int, int, int]     # x0, y0, x1, y1 scene region this tile fills


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    tiles: tuple[Tile, ...]
    margin: int
    out_size: int
    stride: int
    pad: tuple[int, int, int, int]       # left, top, right, bottom

    def input_origin(self, tile: Tile) -> tuple[int, int]:
        """Top-left of the tile's input window in padded-scene coordinates."""
        return (tile.origin[0] - self.margin + self.pad[0], tile.origin[1] - self.margin + self.pad[1])

    def check(self) -> None:
        cover = np.zeros((self.height, self.width), dtype=np.int32)
        for t in self.tiles:
            x0, y0, x1, y1 = t.write
            cover[y0:y1, x0:x1] += 1
        if not np.all(cover == 1):
            raise AssertionError("tile write regions do not partition the scene")


def max_stride(config: UNetConfig) -> int:
    """Longest segment a single tile can fill for arbitrary segment starts."""
    a, trim = config.alignment, config.edge_trim
    return config.output_size - 2 * trim - (a - 1)


def _axis(extent: int, config: UNetConfig, stride: int, offset: int):
    bounds = {0, extent}
    k = 1
    while k * stride - offset < extent:
        if k * stride - offset > 0:
            bounds.add(k * stride - offset)
        k += 1
    bounds = sorted(bounds)
    a, trim, out = config.alignment, config.edge_trim, config.output_size
    segs = []
    for b, e in zip(bounds, bounds[1:]):
        q = ((b - trim) // a) * a
        if q + trim > b or q + out - trim < e:
            raise ValueError(f"segment [{b},{e}) does not fit one tile's clean region")
        segs.append((q, b, e))
    return segs


def plan_tiles(scene_w: int, scene_h: int, config: UNetConfig, stride: int | None = None,
               offset: tuple[int, int] = (0, 0)) -> TilePlan:
    """Partition a scene into tile write regions.

    ``offset`` shifts the tile grid; any offset yields a valid plan whose
    heatmap is identical to the default one.
    """
    if scene_w < 1 or scene_h < 1:
        raise ValueError(f"degenerate scene {scene_w}x{scene_h}")
    limit = max_stride(config)
    if limit < 1:
        raise ValueError(f"network output {config.output_size} too small for tiling")
    stride = limit if stride is None else stride
    if not 1 <= stride <= limit:
        raise ValueError(f"stride must lie in [1, {limit}]")
    xs = _axis(scene_w, config, stride, offset[0] % stride)
    ys = _axis(scene_h, config, stride, offset[1] % stride)
    tiles = tuple(Tile((qx, qy), (bx, by, ex, ey)) for qy, by, ey in ys for qx, bx, ex in xs)
    m, out = config.margin, config.output_size
    left = max(0, m - min(t.origin[0] for t in tiles))
    top = max(0, m - min(t.origin[1] for t in tiles))
    right = max(0, max(t.origin[0] for t in tiles) + out + m - scene_w)
    bottom = max(0, max(t.origin[1] for t in tiles) + out + m - scene_h)
    return TilePlan(scene_w, scene_h, tiles, m, out, stride, (left, top, right, bottom))


def infer_scene(params, raster: Raster, config: UNetConfig, plan: TilePlan | None = None,
                batch: int = 8) -> np.ndarray:
    """Full-scene probability heatmap, shape (height, width)."""
    if len(raster.bands) != config.in_channels:
        raise ValueError(f"raster has {len(raster.bands)} bands, network expects {config.in_channels}")
    if plan is None:
        plan = plan_tiles(raster.width, raster.height, config)
    elif (plan.width, plan.height) != (raster.width, raster.height):
        raise ValueError("tile plan was built for a different scene size")
    padded = reflect_pad(raster, plan.pad).pixels
    size = config.input_size
    heat = np.empty((raster.height, raster.width))
    tiles = list(plan.tiles)
    for start in range(0, len(tiles), batch):
        chunk = tiles[start:start + batch]
        stack = []
        for t in chunk:
            ix, iy = plan.input_origin(t)
            stack.append(padded[:, iy:iy + size, ix:ix + size])
        probs = forward(params, np.stack(stack).astype(np.float64), config)[:, 0]
        for t, p in zip(chunk, probs):
            x0, y0, x1, y1 = t.write
            qx, qy = t.origin
            heat[y0:y1, x0:x1] = p[y0 - qy:y1 - qy, x0 - qx:x1 - qx]
    return heat


def heatmap_raster(heat: np.ndarray) -> Raster:
    return Raster(np.clip(heat, 0, 1)[None].astype(np.float32), ["prob"])
