"""Bird's-eye-view city representation.

A city layout is a semantic map plus a pair of height fields (bottom-up and
top-down, in grid cells). Together they implicitly define a 3D label volume:
cell (i, j, k) carries the semantic class of pixel (i, j) iff
bottom_up(i, j) <= k <= top_down(i, j), and is empty otherwise. One vertical
cell equals one horizontal pixel.

Rasters are numpy arrays indexed [i, j] = [row, col]; world coordinates map
x -> j, y -> i, z -> k.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .semantics import SemanticClass, is_registered, png_palette

# Ground resolution of EPSG:3857 at zoom 18 on the equator, meters per pixel.
DEFAULT_PIXEL_SCALE = 40075016.685578488 / (256 * 2**18)

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SemanticMap:
    """Per-pixel semantic class raster with a physical pixel scale."""

    cells: np.ndarray  # (H, W) uint8 of SemanticClass codes
    pixel_scale: float = DEFAULT_PIXEL_SCALE

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError("semantic map must be a 2D raster with width, height >= 1")
        if not is_registered(cells):
            raise ValueError("semantic map contains unregistered class codes")
        object.__setattr__(self, "cells", _freeze(cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class HeightFieldPair:
    """Bottom-up / top-down heights in grid cells, same shape as the semantic map."""

    bottom_up: np.ndarray
    top_down: np.ndarray

    def __post_init__(self):
        bu = np.ascontiguousarray(self.bottom_up, dtype=np.int32)
        td = np.ascontiguousarray(self.top_down, dtype=np.int32)
        if bu.shape != td.shape or bu.ndim != 2:
            raise ValueError("height fields must be 2D and share one shape")
        if (bu < 0).any() or (td < 0).any():
            raise ValueError("heights must be non-negative")
        object.__setattr__(self, "bottom_up", _freeze(bu))
        object.__setattr__(self, "top_down", _freeze(td))


@dataclass(frozen=True)
class CityLayout:
    """Semantic map + dual height field defining the implicit 3D volume."""

    semantic: SemanticMap
    heights: HeightFieldPair

    def __post_init__(self):
        cells = self.semantic.cells
        bu, td = self.heights.bottom_up, self.heights.top_down
        if cells.shape != bu.shape:
            raise ValueError("semantic map and height fields disagree on shape")
        occ = cells != SemanticClass.NULL
        if (bu[occ] > td[occ]).any():
            raise ValueError("bottom_up exceeds top_down on occupied cells")
        if bu[~occ].any() or td[~occ].any():
            raise ValueError("NULL cells must have zero heights")

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.cells.shape

    @property
    def pixel_scale(self) -> float:
        return self.semantic.pixel_scale


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel building instance ids; 0 marks pixels without an instance."""

    labels: np.ndarray  # (H, W) int32, ids contiguous 1..n
    count: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class LocalWindow:
    """Axis-aligned crop of a layout, padded with NULL outside the parent.

    `origin` is the (i, j) offset of the crop inside the parent grid (may be
    negative when padding was needed). `depth` caps the vertical extent: the
    crop's top_down never exceeds depth - 1. When `roof_rule` is set, lookups
    report BUILDING_ROOF for the top-most occupied cell of each column and
    BUILDING_FACADE below it.
    """

    origin: tuple[int, int]
    depth: int
    semantic: SemanticMap
    heights: HeightFieldPair
    roof_rule: bool = False
    instance_id: int = 0

    @property
    def size(self) -> tuple[int, int, int]:
        h, w = self.semantic.cells.shape
        return (h, w, self.depth)

    def lookup(self, i: int, j: int, k: int) -> int:
        """Volume lookup in window-local coordinates (Eq. 1 plus the roof rule)."""
        h, w = self.semantic.cells.shape
        if not (0 <= i < h and 0 <= j < w) or k < 0 or k >= self.depth:
            return int(SemanticClass.NULL)
        klass = int(self.semantic.cells[i, j])
        if klass == SemanticClass.NULL:
            return int(SemanticClass.NULL)
        bu = int(self.heights.bottom_up[i, j])
        td = int(self.heights.top_down[i, j])
        if not (bu <= k <= td):
            return int(SemanticClass.NULL)
        if self.roof_rule:
            return int(SemanticClass.BUILDING_ROOF if k == td else SemanticClass.BUILDING_FACADE)
        return klass

    def lookup_grid(self) -> np.ndarray:
        """Materialize the full (H, W, depth) label volume of this window."""
        h, w = self.semantic.cells.shape
        k = np.arange(self.depth)[None, None, :]
        bu = self.heights.bottom_up[:, :, None]
        td = self.heights.top_down[:, :, None]
        occ = (self.semantic.cells[:, :, None] != SemanticClass.NULL) & (bu <= k) & (k <= td)
        if self.roof_rule:
            vol = np.where(occ & (k == td), int(SemanticClass.BUILDING_ROOF), 0)
            vol = np.where(occ & (k < td), int(SemanticClass.BUILDING_FACADE), vol)
            return vol.astype(np.uint8)
        return np.where(occ, self.semantic.cells[:, :, None], 0).astype(np.uint8)


def volume_lookup(layout: CityLayout, i: int, j: int, k: int) -> int:
    """Value of the implicit 3D volume at (i, j, k).

    Returns the pixel's class iff bottom_up <= k <= top_down (both ends
    inclusive); anything outside the generated raster or the height slab is
    NULL.
    """
    h, w = layout.shape
    if not (0 <= i < h and 0 <= j < w) or k < 0:
        return int(SemanticClass.NULL)
    bu = int(layout.heights.bottom_up[i, j])
    td = int(layout.heights.top_down[i, j])
    if bu <= k <= td:
        return int(layout.semantic.cells[i, j])
    return int(SemanticClass.NULL)


def _crop_padded(arr: np.ndarray, origin: tuple[int, int], size: tuple[int, int], fill=0) -> np.ndarray:
    """Crop arr[origin : origin+size] with constant padding outside bounds."""
    i0, j0 = origin
    nh, nw = size
    out = np.full((nh, nw), fill, dtype=arr.dtype)
    si0, sj0 = max(i0, 0), max(j0, 0)
    si1, sj1 = min(i0 + nh, arr.shape[0]), min(j0 + nw, arr.shape[1])
    if si0 < si1 and sj0 < sj1:
        out[si0 - i0 : si1 - i0, sj0 - j0 : sj1 - j0] = arr[si0:si1, sj0:sj1]
    return out


def extract_local_window(
    layout: CityLayout, center: tuple[int, int], size: tuple[int, int, int]
) -> LocalWindow:
    """Extract an (N_H, N_W, N_D) window centered on `center`.

    Even sizes round the center down (center pixel lands at index size // 2).
    Regions outside the layout are NULL with zero heights; top_down is clamped
    to N_D - 1, and columns starting above the cap become NULL.
    """
    nh, nw, nd = size
    if nh < 1 or nw < 1 or nd < 1:
        raise ValueError("window size components must be >= 1")
    ci, cj = center
    origin = (int(ci) - nh // 2, int(cj) - nw // 2)
    sem = _crop_padded(layout.semantic.cells, origin, (nh, nw))
    bu = _crop_padded(layout.heights.bottom_up, origin, (nh, nw))
    td = _crop_padded(layout.heights.top_down, origin, (nh, nw))
    td = np.minimum(td, nd - 1)
    drowned = (sem != SemanticClass.NULL) & (bu > td)
    sem[drowned] = SemanticClass.NULL
    bu[drowned] = 0
    td[drowned] = 0
    # Keep NULL columns at zero height after clamping.
    bu[sem == SemanticClass.NULL] = 0
    td[sem == SemanticClass.NULL] = 0
    return LocalWindow(
        origin=origin,
        depth=nd,
        semantic=SemanticMap(sem, layout.pixel_scale),
        heights=HeightFieldPair(bu, td),
    )


def instantiate_buildings(semantic: SemanticMap) -> InstanceMap:
    """Label 4-connected components of building pixels.

    Ids are contiguous 1..n, assigned by raster-scan order of each
    component's first pixel, so labeling is reproducible across runs.
    """
    mask = semantic.cells == SemanticClass.BUILDING_FACADE
    raw, n = ndimage.label(mask, structure=_CROSS)
    if n == 0:
        return InstanceMap(np.zeros_like(raw, dtype=np.int32), 0)
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size, dtype=np.int64))
    order = np.argsort(first[1:], kind="stable")  # old label-1 -> rank
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return InstanceMap(remap[raw], n)


def isolate_instance(window: LocalWindow, instances: InstanceMap, instance_id: int) -> LocalWindow:
    """Keep only the cells of one building instance; everything else goes NULL.

    `instances` is defined on the window's parent grid. An id that does not
    appear inside the window yields an all-NULL window.
    """
    if instance_id < 1:
        raise ValueError("instance id must be >= 1")
    nh, nw, _ = window.size
    inst = _crop_padded(instances.labels, window.origin, (nh, nw))
    keep = inst == instance_id
    sem = np.where(keep, window.semantic.cells, 0).astype(np.uint8)
    bu = np.where(keep, window.heights.bottom_up, 0)
    td = np.where(keep, window.heights.top_down, 0)
    return replace(
        window,
        semantic=SemanticMap(sem, window.semantic.pixel_scale),
        heights=HeightFieldPair(bu, td),
        instance_id=instance_id,
    )


def relabel_facade_roof(window: LocalWindow, instance_id: int) -> LocalWindow:
    """Mark the window so lookups split the instance into facade and roof.

    The top-most occupied cell of each column (k == top_down) reads as
    BUILDING_ROOF, cells below it as BUILDING_FACADE. A single-layer column
    (bottom_up == top_down) is all roof. This is a lookup rule, not a raster
    rewrite.
    """
    return replace(window, roof_rule=True, instance_id=instance_id)


# -- tiled extrapolation ------------------------------------------------------

TILE_SIZE = 512
TILE_OVERLAP = 0.25

TileSource = Callable[..., tuple[np.ndarray, np.ndarray, np.ndarray]]


def _tile_positions(extent: int, tile: int, stride: int) -> list[int]:
    positions = list(range(0, extent - tile + 1, stride))
    if positions[-1] != extent - tile:
        positions.append(extent - tile)
    return positions


def tiled_extrapolate(
    tile_source: TileSource,
    target_size: tuple[int, int],
    tile_size: int = TILE_SIZE,
    overlap: float = TILE_OVERLAP,
    pixel_scale: float = DEFAULT_PIXEL_SCALE,
) -> CityLayout:
    """Assemble an arbitrarily large layout by sliding a fixed-size tile window.

    The window slides with stride = (1 - overlap) * tile_size (384 for 512
    tiles at 25% overlap). At each step the tile source is called as

        tile_source(origin=(i0, j0), semantic=..., bottom_up=..., top_down=...,
                    committed=...)

    where the rasters hold the current content of the tile region and
    `committed` flags pixels already generated by earlier steps. The source
    returns a full (tile, tile) semantic/bottom-up/top-down triple; committed
    pixels are conditioning only and are never overwritten.
    """
    w, h = target_size
    if w < tile_size or h < tile_size:
        raise ValueError("target size must be at least one tile")
    stride = int(round(tile_size * (1.0 - overlap)))
    sem = np.zeros((h, w), dtype=np.uint8)
    bu = np.zeros((h, w), dtype=np.int32)
    td = np.zeros((h, w), dtype=np.int32)
    committed = np.zeros((h, w), dtype=bool)
    for i0 in _tile_positions(h, tile_size, stride):
        for j0 in _tile_positions(w, tile_size, stride):
            sl = (slice(i0, i0 + tile_size), slice(j0, j0 + tile_size))
            t_sem, t_bu, t_td = tile_source(
                origin=(i0, j0),
                semantic=sem[sl].copy(),
                bottom_up=bu[sl].copy(),
                top_down=td[sl].copy(),
                committed=committed[sl].copy(),
            )
            fresh = ~committed[sl]
            sem[sl][fresh] = np.asarray(t_sem, dtype=np.uint8)[fresh]
            bu[sl][fresh] = np.asarray(t_bu, dtype=np.int32)[fresh]
            td[sl][fresh] = np.asarray(t_td, dtype=np.int32)[fresh]
            committed[sl] = True
    return CityLayout(SemanticMap(sem, pixel_scale), HeightFieldPair(bu, td))


class ConstantTileSource:
    """Tile source painting a single class at a fixed height everywhere."""

    def __init__(self, klass: SemanticClass = SemanticClass.ROAD, top_down: int = 7):
        self.klass = int(klass)
        self.td = int(top_down)

    def __call__(self, origin, semantic, bottom_up, top_down, committed):
        shape = semantic.shape
        return (
            np.full(shape, self.klass, dtype=np.uint8),
            np.zeros(shape, dtype=np.int32),
            np.full(shape, self.td, dtype=np.int32),
        )


class ProceduralTileSource:
    """Seeded deterministic city-block pattern, consistent across tile seams.

    The pattern is a pure function of global pixel coordinates and the seed
    (streets on a fixed grid, one building per block with hashed footprint and
    height, occasional parks and ponds), so overlap conditioning is satisfied
    automatically: regenerating a committed region reproduces it bit-exactly.
    """

    def __init__(self, seed: int = 0, block: int = 96, road_px: int = 12, pixel_scale: float = DEFAULT_PIXEL_SCALE):
        self.seed = int(seed)
        self.block = int(block)
        self.road_px = int(road_px)
        self.pixel_scale = float(pixel_scale)

    def _block_hash(self, bi: np.ndarray, bj: np.ndarray) -> np.ndarray:
        from .encoders import splitmix64

        key = (bi.astype(np.uint64) << np.uint64(32)) ^ bj.astype(np.uint64)
        return splitmix64(key ^ np.uint64(self.seed))

    def __call__(self, origin, semantic, bottom_up, top_down, committed):
        h, w = semantic.shape
        ii = origin[0] + np.arange(h)[:, None]
        jj = origin[1] + np.arange(w)[None, :]
        ii = np.broadcast_to(ii, (h, w))
        jj = np.broadcast_to(jj, (h, w))
        b, r = self.block, self.road_px
        on_road = ((ii % b) < r) | ((jj % b) < r)
        bi, bj = ii // b, jj // b
        hsh = self._block_hash(bi, bj)
        u = (hsh >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        # Block interior local coords.
        li, lj = ii % b, jj % b
        margin = r + 6
        inner = (li >= margin) & (lj >= margin) & (li < b - 8) & (lj < b - 8)
        kind = (hsh % np.uint64(10)).astype(np.int64)  # 0-6 building, 7-8 park, 9 pond
        height_m = 10.0 + 60.0 * u
        sem = np.zeros((h, w), dtype=np.uint8)
        td = np.zeros((h, w), dtype=np.int32)
        sem[on_road] = SemanticClass.ROAD
        td[on_road] = int(round(4.0 / self.pixel_scale))
        bmask = inner & ~on_road & (kind <= 6)
        pmask = inner & ~on_road & ((kind == 7) | (kind == 8))
        wmask = inner & ~on_road & (kind == 9)
        sem[bmask] = SemanticClass.BUILDING_FACADE
        td[bmask] = np.maximum(1, np.round(height_m[bmask] / self.pixel_scale)).astype(np.int32)
        sem[pmask] = SemanticClass.VEGETATION
        td[pmask] = np.round((8.0 + 8.0 * u[pmask]) / self.pixel_scale).astype(np.int32)
        sem[wmask] = SemanticClass.WATER
        td[wmask] = 0
        bu = np.zeros((h, w), dtype=np.int32)
        return sem, bu, td


# -- PNG serialization --------------------------------------------------------


def _save_u16(path: Path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<u2")
    Image.frombytes("I;16", (a.shape[1], a.shape[0]), a.tobytes()).save(path, format="PNG")


def _load_u16(path: Path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img, dtype=np.uint16).astype(np.int32)


def save_layout(layout: CityLayout, basename: str | Path) -> list[Path]:
    """Write the PNG triplet <basename>.sem.png / .hbu.png / .htd.png.

    The semantic map is an 8-bit indexed PNG whose palette index equals the
    class id; height fields are 16-bit grayscale (value = height in cells).
    """
    base = Path(basename)
    base.parent.mkdir(parents=True, exist_ok=True)
    sem_path = base.with_name(base.name + ".sem.png")
    img = Image.fromarray(layout.semantic.cells, mode="P")
    img.putpalette(png_palette())
    img.save(sem_path, format="PNG")
    bu_path = base.with_name(base.name + ".hbu.png")
    td_path = base.with_name(base.name + ".htd.png")
    _save_u16(bu_path, layout.heights.bottom_up)
    _save_u16(td_path, layout.heights.top_down)
    return [sem_path, bu_path, td_path]


def load_layout(basename: str | Path, pixel_scale: float = DEFAULT_PIXEL_SCALE) -> CityLayout:
    base = Path(basename)
    sem = np.asarray(Image.open(base.with_name(base.name + ".sem.png")), dtype=np.uint8)
    bu = _load_u16(base.with_name(base.name + ".hbu.png"))
    td = _load_u16(base.with_name(base.name + ".htd.png"))
    return CityLayout(SemanticMap(sem, pixel_scale), HeightFieldPair(bu, td))


def save_instances(instances: InstanceMap, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if instances.count > 0xFFFF:
        raise ValueError("instance map does not fit 16-bit PNG")
    _save_u16(p, instances.labels.astype(np.uint16))
    return p


def load_instances(path: str | Path) -> InstanceMap:
    labels = _load_u16(Path(path))
    return InstanceMap(labels, int(labels.max()))
