"""Geodata ingestion: tagged polygons/polylines to a rasterized city layout.

Features arrive either as a newline-delimited JSON file (one feature object
per line, schema below) or through a small OSM-XML front-end. They are
projected to Web Mercator pixels at the grid's zoom level and painted into a
semantic map plus height fields.

Feature line schema::

    {"class": "building", "geometry": [[lon, lat], ...], "height_m": 24.0}
    {"class": "road",     "geometry": [[lon, lat], ...], "width_m": 7.0}

Classes: road, highway, building, vegetation, water, other. Polygons are
closed rings (first vertex == last); open geometry is stroked as a polyline.
Highways accept optional "deck_height_m" / "clearance_m" for elevated decks.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layout import CityLayout, HeightFieldPair, SemanticMap
from .mercator import MAX_LATITUDE, MercatorGrid, project_mercator
from .perlin import PerlinField, perlin_sample
from .semantics import PAINT_ORDER, SemanticClass

DEFAULT_BUILDING_HEIGHT_M = 18.0
ROAD_HEIGHT_M = 4.0

_CLASS_NAMES = {
    "road": SemanticClass.ROAD,
    "highway": SemanticClass.HIGHWAY,
    "building": SemanticClass.BUILDING_FACADE,
    "vegetation": SemanticClass.VEGETATION,
    "green": SemanticClass.VEGETATION,
    "water": SemanticClass.WATER,
    "other": SemanticClass.OTHER,
    "construction": SemanticClass.OTHER,
}


@dataclass(frozen=True)
class GeoFeature:
    """One tagged geometry in lon/lat degrees."""

    geometry: tuple[tuple[float, float], ...]
    klass: SemanticClass
    height_m: float | None = None
    width_m: float | None = None
    deck_height_m: float | None = None
    clearance_m: float | None = None

    def __post_init__(self):
        if len(self.geometry) < 2:
            raise ValueError("geometry needs at least two vertices")
        for lon, lat in self.geometry:
            if not -180.0 <= lon <= 180.0 or not (-MAX_LATITUDE < lat < MAX_LATITUDE):
                raise ValueError(f"vertex ({lon}, {lat}) outside the Web Mercator validity band")

    @property
    def is_polygon(self) -> bool:
        return len(self.geometry) >= 4 and self.geometry[0] == self.geometry[-1]


def parse_features(path: str | Path) -> list[GeoFeature]:
    """Read the newline-delimited JSON feature file."""
    features = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{ln}: bad JSON: {exc}") from exc
        name = str(obj.get("class", "")).lower()
        if name not in _CLASS_NAMES:
            raise ValueError(f"{path}:{ln}: unknown class {name!r}")
        features.append(
            GeoFeature(
                geometry=tuple((float(lon), float(lat)) for lon, lat in obj["geometry"]),
                klass=_CLASS_NAMES[name],
                height_m=obj.get("height_m"),
                width_m=obj.get("width_m"),
                deck_height_m=obj.get("deck_height_m"),
                clearance_m=obj.get("clearance_m"),
            )
        )
    return features


_GREEN_TAGS = {
    ("leisure", "park"),
    ("leisure", "garden"),
    ("leisure", "pitch"),
    ("landuse", "grass"),
    ("landuse", "forest"),
    ("landuse", "meadow"),
    ("landuse", "recreation_ground"),
    ("natural", "wood"),
}


def parse_osm_xml(path: str | Path) -> list[GeoFeature]:
    """Minimal OSM-XML front-end: ways with recognized tags become features.

    Understood tags: highway=motorway/trunk -> highway, other highway=* ->
    road (width from "width" tag, default 7 m); building=* (height from
    "height" or 3 m per "building:levels"); natural=water / landuse=reservoir;
    common greenery tags. Relations/multipolygons are out of scope.
    """
    root = ET.parse(str(path)).getroot()
    nodes = {
        n.attrib["id"]: (float(n.attrib["lon"]), float(n.attrib["lat"]))
        for n in root.iter("node")
    }
    feats: list[GeoFeature] = []
    for way in root.iter("way"):
        tags = {t.attrib["k"]: t.attrib["v"] for t in way.iter("tag")}
        coords = tuple(nodes[nd.attrib["ref"]] for nd in way.iter("nd") if nd.attrib["ref"] in nodes)
        if len(coords) < 2:
            continue
        if "highway" in tags:
            klass = SemanticClass.HIGHWAY if tags["highway"] in ("motorway", "trunk") else SemanticClass.ROAD
            try:
                width = float(tags.get("width", "7"))
            except ValueError:
                width = 7.0
            feats.append(GeoFeature(coords, klass, width_m=width))
        elif "building" in tags:
            height = None
            if "height" in tags:
                try:
                    height = float(tags["height"].removesuffix("m").strip())
                except ValueError:
                    height = None
            elif "building:levels" in tags:
                try:
                    height = 3.0 * float(tags["building:levels"])
                except ValueError:
                    height = None
            if coords[0] != coords[-1]:
                coords = coords + (coords[0],)
            feats.append(GeoFeature(coords, SemanticClass.BUILDING_FACADE, height_m=height))
        elif tags.get("natural") == "water" or tags.get("landuse") == "reservoir":
            if coords[0] != coords[-1]:
                coords = coords + (coords[0],)
            feats.append(GeoFeature(coords, SemanticClass.WATER))
        elif any((k, v) in _GREEN_TAGS for k, v in tags.items()):
            if coords[0] != coords[-1]:
                coords = coords + (coords[0],)
            feats.append(GeoFeature(coords, SemanticClass.VEGETATION))
        elif tags.get("landuse") == "construction":
            if coords[0] != coords[-1]:
                coords = coords + (coords[0],)
            feats.append(GeoFeature(coords, SemanticClass.OTHER))
    return feats


# -- rasterization ------------------------------------------------------------


def _project_local(feature: GeoFeature, grid: MercatorGrid) -> np.ndarray:
    """(N, 2) local pixel coordinates (x, y) of the feature's vertices."""
    pts = np.array([project_mercator(lon, lat, grid.zoom) for lon, lat in feature.geometry])
    return pts - np.asarray(grid.origin_px, dtype=np.float64)


def _fill_polygon(mask: np.ndarray, pts: np.ndarray) -> None:
    """Even-odd scanline fill of the polygon over pixel centers."""
    h, w = mask.shape
    ys = pts[:, 1]
    row0 = max(0, int(math.floor(ys.min() - 0.5)))
    row1 = min(h - 1, int(math.ceil(ys.max())))
    x0s, y0s = pts[:-1, 0], pts[:-1, 1]
    x1s, y1s = pts[1:, 0], pts[1:, 1]
    keep = y0s != y1s
    x0s, y0s, x1s, y1s = x0s[keep], y0s[keep], x1s[keep], y1s[keep]
    if x0s.size == 0:
        return
    for row in range(row0, row1 + 1):
        yc = row + 0.5
        # Half-open span rule so shared vertices count once.
        hit = ((y0s <= yc) & (yc < y1s)) | ((y1s <= yc) & (yc < y0s))
        if not hit.any():
            continue
        xs = x0s[hit] + (yc - y0s[hit]) * (x1s[hit] - x0s[hit]) / (y1s[hit] - y0s[hit])
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            ja = max(0, int(math.ceil(a - 0.5)))
            jb = min(w - 1, int(math.ceil(b - 0.5)) - 1)
            if ja <= jb:
                mask[row, ja : jb + 1] = True


def _stroke_polyline(mask: np.ndarray, pts: np.ndarray, width_px: float) -> None:
    """Mark pixel centers within width/2 of the polyline (round caps/joins)."""
    h, w = mask.shape
    r = max(width_px, 1.0) / 2.0
    for (xa, ya), (xb, yb) in zip(pts[:-1], pts[1:]):
        j0 = max(0, int(math.floor(min(xa, xb) - r - 1)))
        j1 = min(w - 1, int(math.ceil(max(xa, xb) + r + 1)))
        i0 = max(0, int(math.floor(min(ya, yb) - r - 1)))
        i1 = min(h - 1, int(math.ceil(max(ya, yb) + r + 1)))
        if j0 > j1 or i0 > i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        px = jj + 0.5
        py = ii + 0.5
        ex, ey = xb - xa, yb - ya
        seg_len2 = ex * ex + ey * ey
        if seg_len2 == 0.0:
            d2 = (px - xa) ** 2 + (py - ya) ** 2
        else:
            t = np.clip(((px - xa) * ex + (py - ya) * ey) / seg_len2, 0.0, 1.0)
            d2 = (px - (xa + t * ex)) ** 2 + (py - (ya + t * ey)) ** 2
        hit = d2 <= r * r
        mask[i0 : i1 + 1, j0 : j1 + 1] |= hit


def rasterize(features: list[GeoFeature], grid: MercatorGrid, perlin: PerlinField) -> CityLayout:
    """Paint features into a CityLayout.

    Painting priority (later wins): OTHER < WATER < VEGETATION < ROAD <
    HIGHWAY < BUILDING. Heights: roads 4 m top-down, water 0, vegetation from
    the Perlin field, buildings from height_m (default 18 m); bottom-up stays
    0 unless a highway carries an explicit clearance. Geometry outside the
    grid is silently clipped.
    """
    w, h = grid.size
    ps = grid.pixel_scale
    sem = np.zeros((h, w), dtype=np.uint8)
    bu = np.zeros((h, w), dtype=np.int32)
    td = np.zeros((h, w), dtype=np.int32)

    by_class: dict[SemanticClass, list[GeoFeature]] = {k: [] for k in PAINT_ORDER}
    for f in features:
        by_class[f.klass].append(f)

    def road_cells() -> int:
        return int(round(ROAD_HEIGHT_M / ps))

    for klass in PAINT_ORDER:
        for f in by_class[klass]:
            pts = _project_local(f, grid)
            mask = np.zeros((h, w), dtype=bool)
            if f.is_polygon:
                _fill_polygon(mask, pts)
            else:
                width_px = (f.width_m / ps) if f.width_m else 1.0
                _stroke_polyline(mask, pts, width_px)
            if not mask.any():
                continue
            sem[mask] = int(klass)
            if klass == SemanticClass.ROAD:
                bu[mask] = 0
                td[mask] = road_cells()
            elif klass == SemanticClass.HIGHWAY:
                deck = f.deck_height_m if f.deck_height_m is not None else ROAD_HEIGHT_M
                clear = f.clearance_m if f.clearance_m is not None else 0.0
                bu[mask] = int(round(clear / ps))
                td[mask] = max(int(round(deck / ps)), int(round(clear / ps)))
            elif klass == SemanticClass.WATER:
                bu[mask] = 0
                td[mask] = 0
            elif klass == SemanticClass.VEGETATION:
                ii, jj = np.nonzero(mask)
                gx = jj + grid.origin_px[0] + 0.5
                gy = ii + grid.origin_px[1] + 0.5
                meters = perlin_sample(perlin, gx, gy)
                bu[mask] = 0
                td[ii, jj] = np.round(np.asarray(meters) / ps).astype(np.int32)
            elif klass == SemanticClass.BUILDING_FACADE:
                height = f.height_m if f.height_m is not None else DEFAULT_BUILDING_HEIGHT_M
                bu[mask] = 0
                td[mask] = max(0, int(round(height / ps)))
            else:  # OTHER / construction: ground-level marker
                bu[mask] = 0
                td[mask] = 0
    return CityLayout(SemanticMap(sem, ps), HeightFieldPair(bu, td))
