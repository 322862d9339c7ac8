"""Semantic class registry shared by every raster in the pipeline."""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class SemanticClass(IntEnum):
    NULL = 0
    ROAD = 1
    HIGHWAY = 2
    BUILDING_FACADE = 3
    VEGETATION = 4
    WATER = 5
    OTHER = 6
    VEHICLE = 7
    BUILDING_ROOF = 8


N_CLASSES = 9

# Painting priority at rasterization, lowest first; a later class wins the pixel.
PAINT_ORDER = (
    SemanticClass.OTHER,
    SemanticClass.WATER,
    SemanticClass.VEGETATION,
    SemanticClass.ROAD,
    SemanticClass.HIGHWAY,
    SemanticClass.BUILDING_FACADE,
)

BUILDING_CLASSES = (SemanticClass.BUILDING_FACADE, SemanticClass.BUILDING_ROOF)

# Display colors, one RGB triple per class id.
PALETTE = {
    SemanticClass.NULL: (0, 0, 0),
    SemanticClass.ROAD: (222, 56, 49),
    SemanticClass.HIGHWAY: (245, 136, 40),
    SemanticClass.BUILDING_FACADE: (233, 211, 82),
    SemanticClass.VEGETATION: (84, 169, 74),
    SemanticClass.WATER: (63, 110, 224),
    SemanticClass.OTHER: (85, 214, 213),
    SemanticClass.VEHICLE: (204, 78, 205),
    SemanticClass.BUILDING_ROOF: (186, 152, 58),
}


def palette_floats() -> np.ndarray:
    """(N_CLASSES, 3) float RGB in [0, 1], indexed by class id."""
    out = np.zeros((N_CLASSES, 3), dtype=np.float64)
    for klass, rgb in PALETTE.items():
        out[int(klass)] = np.asarray(rgb, dtype=np.float64) / 255.0
    return out


def png_palette() -> list[int]:
    """Flat 768-entry palette for 8-bit indexed PNGs (class id = palette index)."""
    flat = [0] * 768
    for klass, rgb in PALETTE.items():
        flat[3 * int(klass) : 3 * int(klass) + 3] = list(rgb)
    return flat


def is_registered(cells: np.ndarray) -> bool:
    return bool(np.all((cells >= 0) & (cells < N_CLASSES)))
