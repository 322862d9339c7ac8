"""Classic 2D gradient (Perlin) noise with seeded lattice gradients.

The raw noise vanishes at lattice points and stays strictly inside (-1, 1)
for unit gradients, so the affine map onto an output range never touches the
range endpoints. Same seed, same field, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import splitmix64, _unit_interval


@dataclass(frozen=True)
class PerlinField:
    seed: int
    cell_size: float = 64.0  # pixels per lattice cell
    out_range: tuple[float, float] = (8.0, 16.0)  # meters

    def __post_init__(self):
        lo, hi = self.out_range
        if not hi > lo:
            raise ValueError("out_range must be increasing")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")


def _gradients(field: PerlinField, xi: np.ndarray, yi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit gradient per lattice point, hashed from (seed, xi, yi)."""
    with np.errstate(over="ignore"):
        key = splitmix64(xi.astype(np.int64).astype(np.uint64) ^ (yi.astype(np.int64).astype(np.uint64) << np.uint64(32)))
        key = splitmix64(key ^ np.uint64(field.seed & 0xFFFFFFFFFFFFFFFF))
    angle = _unit_interval(key) * (2.0 * np.pi)
    return np.cos(angle), np.sin(angle)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_raw(field: PerlinField, x, y) -> np.ndarray:
    """Raw noise in (-1, 1) at pixel coordinates (x, y); vectorized."""
    gx = np.asarray(x, dtype=np.float64) / field.cell_size
    gy = np.asarray(y, dtype=np.float64) / field.cell_size
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    n = {}
    for dx in (0, 1):
        for dy in (0, 1):
            cgx, cgy = _gradients(field, x0 + dx, y0 + dy)
            n[dx, dy] = cgx * (fx - dx) + cgy * (fy - dy)
    u = _fade(fx)
    v = _fade(fy)
    nx0 = n[0, 0] + u * (n[1, 0] - n[0, 0])
    nx1 = n[0, 1] + u * (n[1, 1] - n[0, 1])
    return nx0 + v * (nx1 - nx0)


def perlin_sample(field: PerlinField, x, y) -> np.ndarray | float:
    """Noise mapped affinely from [-1, 1] onto field.out_range (meters)."""
    lo, hi = field.out_range
    out = lo + (perlin_raw(field, x, y) + 1.0) * 0.5 * (hi - lo)
    if np.ndim(out) == 0:
        return float(out)
    return out
