"""Web Mercator (EPSG:3857) pixel math at tile-pyramid zoom levels."""

from __future__ import annotations

import math
from dataclasses import dataclass

TILE_SIZE = 256
EARTH_CIRCUMFERENCE = 40075016.685578488  # meters, 2 * pi * 6378137
MAX_LATITUDE = 85.051129  # Web Mercator validity band (open interval)


def world_pixels(zoom: int) -> int:
    """World extent in pixels along each axis at `zoom`."""
    return TILE_SIZE * 2**zoom


def project_mercator(lon: float, lat: float, zoom: int) -> tuple[float, float]:
    """Degrees -> global pixel coordinates at `zoom`.

    x = (lon + 180) / 360 * 256 * 2^zoom
    y = (1 - ln(tan(lat) + sec(lat)) / pi) / 2 * 256 * 2^zoom
    """
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not -MAX_LATITUDE < lat < MAX_LATITUDE:
        raise ValueError(f"latitude {lat} outside Web Mercator validity band (+-{MAX_LATITUDE})")
    n = world_pixels(zoom)
    x = (lon + 180.0) / 360.0 * n
    phi = math.radians(lat)
    y = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n
    return x, y


def unproject_mercator(x: float, y: float, zoom: int) -> tuple[float, float]:
    """Global pixel coordinates -> degrees (inverse of project_mercator)."""
    n = world_pixels(zoom)
    lon = x / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / n))))
    return lon, lat


def ground_resolution(zoom: int, lat: float = 0.0) -> float:
    """Meters per pixel at `lat` (the equator value is ~0.5972 at zoom 18)."""
    return EARTH_CIRCUMFERENCE * math.cos(math.radians(lat)) / world_pixels(zoom)


@dataclass(frozen=True)
class MercatorGrid:
    """A raster window in global pixel space at a fixed zoom."""

    zoom: int
    origin_px: tuple[int, int]  # global pixel (x, y) of the raster corner
    size: tuple[int, int]  # (W, H) pixels

    def __post_init__(self):
        n = world_pixels(self.zoom)
        x0, y0 = self.origin_px
        w, h = self.size
        if w < 1 or h < 1:
            raise ValueError("grid must be at least 1x1")
        if not (0 <= x0 and 0 <= y0 and x0 + w <= n and y0 + h <= n):
            raise ValueError("grid does not fit inside the world extent at this zoom")

    @property
    def pixel_scale(self) -> float:
        return ground_resolution(self.zoom)

    @staticmethod
    def from_bbox(lon0: float, lat0: float, lon1: float, lat1: float, zoom: int) -> "MercatorGrid":
        """Smallest pixel-aligned grid covering the lon/lat bounding box."""
        xa, ya = project_mercator(lon0, lat0, zoom)
        xb, yb = project_mercator(lon1, lat1, zoom)
        x_min, x_max = sorted((xa, xb))
        y_min, y_max = sorted((ya, yb))
        origin = (int(math.floor(x_min)), int(math.floor(y_min)))
        size = (
            max(1, int(math.ceil(x_max)) - origin[0]),
            max(1, int(math.ceil(y_max)) - origin[1]),
        )
        return MercatorGrid(zoom=zoom, origin_px=origin, size=size)
