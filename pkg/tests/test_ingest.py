import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cityforge.ingest import (
    DEFAULT_BUILDING_HEIGHT_M,
    GeoFeature,
    parse_features,
    parse_osm_xml,
    rasterize,
)
from cityforge.layout import save_layout
from cityforge.mercator import (
    MercatorGrid,
    ground_resolution,
    project_mercator,
    unproject_mercator,
)
from cityforge.perlin import PerlinField, perlin_raw, perlin_sample
from cityforge.semantics import SemanticClass

PS18 = ground_resolution(18)


# -- mercator -------------------------------------------------------------------


def test_world_center():
    assert project_mercator(0.0, 0.0, 18) == (33554432.0, 33554432.0)


def test_right_world_edge():
    x, _ = project_mercator(180.0, 0.0, 18)
    assert x == 67108864.0


def test_ground_resolution_zoom18():
    assert abs(ground_resolution(18) - 0.5972) < 5e-4


def test_latitude_rejection():
    with pytest.raises(ValueError):
        project_mercator(0.0, 86.0, 18)
    with pytest.raises(ValueError):
        project_mercator(0.0, -89.0, 18)
    with pytest.raises(ValueError):
        project_mercator(181.0, 0.0, 18)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-180.0, 180.0),
    st.floats(-85.0, 85.0),
)
def test_roundtrip_property(lon, lat):
    x, y = project_mercator(lon, lat, 18)
    lon2, lat2 = unproject_mercator(x, y, 18)
    assert abs(lon2 - lon) < 1e-9
    assert abs(lat2 - lat) < 1e-9


def test_monotone_lon_antimonotone_lat():
    xs = [project_mercator(lon, 10.0, 18)[0] for lon in np.linspace(-170, 170, 30)]
    assert all(a < b for a, b in zip(xs, xs[1:]))
    ys = [project_mercator(10.0, lat, 18)[1] for lat in np.linspace(-80, 80, 30)]
    assert all(a > b for a, b in zip(ys, ys[1:]))


def test_grid_from_bbox_and_validation():
    grid = MercatorGrid.from_bbox(0.0, 0.0, 0.003, 0.003, 18)
    assert grid.size[0] >= 1 and grid.size[1] >= 1
    with pytest.raises(ValueError):
        MercatorGrid(zoom=2, origin_px=(1000, 0), size=(100, 100))


# -- perlin ---------------------------------------------------------------------


def test_perlin_lattice_points_midpoint():
    field = PerlinField(seed=1, cell_size=64.0, out_range=(8.0, 16.0))
    for x, y in ((0, 0), (64, 0), (128, 192), (-64, 64)):
        assert perlin_sample(field, x, y) == pytest.approx(12.0, abs=1e-12)


def test_perlin_deterministic():
    field = PerlinField(seed=77)
    a = perlin_sample(field, 12.3, 45.6)
    b = perlin_sample(field, 12.3, 45.6)
    assert a == b
    assert perlin_sample(PerlinField(seed=78), 12.3, 45.6) != a


def test_perlin_range_sweep(rng):
    field = PerlinField(seed=5, cell_size=48.0, out_range=(8.0, 16.0))
    xs = rng.uniform(-1e4, 1e4, size=1_000_000)
    ys = rng.uniform(-1e4, 1e4, size=1_000_000)
    vals = perlin_sample(field, xs, ys)
    assert vals.min() >= 8.0
    assert vals.max() <= 16.0


def test_perlin_raw_varies(rng):
    field = PerlinField(seed=3)
    vals = perlin_raw(field, rng.uniform(0, 512, 1000), rng.uniform(0, 512, 1000))
    assert vals.std() > 0.05


# -- feature parsing ---------------------------------------------------------------


def test_parse_features_jsonl(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text(
        "\n".join(
            [
                '{"class": "road", "geometry": [[0.0, 0.0], [0.001, 0.0]], "width_m": 7.0}',
                "# comment line",
                '{"class": "building", "geometry": [[0.0, 0.0], [0.0005, 0.0], [0.0005, 0.0005], [0.0, 0.0]], "height_m": 30}',
            ]
        )
    )
    feats = parse_features(p)
    assert len(feats) == 2
    assert feats[0].klass == SemanticClass.ROAD and not feats[0].is_polygon
    assert feats[1].klass == SemanticClass.BUILDING_FACADE and feats[1].is_polygon


def test_parse_features_rejects_unknown_class(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"class": "airport", "geometry": [[0, 0], [1, 1]]}')
    with pytest.raises(ValueError):
        parse_features(p)


def test_geofeature_rejects_out_of_band():
    with pytest.raises(ValueError):
        GeoFeature(((0.0, 86.5), (1.0, 86.5)), SemanticClass.ROAD)


def test_parse_osm_xml(tmp_path):
    xml = """<?xml version="1.0"?>
    <osm>
      <node id="1" lon="0.0000" lat="0.0000"/>
      <node id="2" lon="0.0010" lat="0.0000"/>
      <node id="3" lon="0.0010" lat="0.0010"/>
      <node id="4" lon="0.0000" lat="0.0010"/>
      <way id="10"><nd ref="1"/><nd ref="2"/><tag k="highway" v="residential"/><tag k="width" v="9"/></way>
      <way id="11"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><tag k="building" v="yes"/><tag k="building:levels" v="5"/></way>
      <way id="12"><nd ref="2"/><nd ref="3"/><nd ref="4"/><tag k="natural" v="water"/></way>
      <way id="13"><nd ref="1"/><nd ref="3"/><nd ref="4"/><tag k="leisure" v="park"/></way>
    </osm>"""
    p = tmp_path / "map.osm"
    p.write_text(xml)
    feats = parse_osm_xml(p)
    classes = sorted(f.klass for f in feats)
    assert classes == sorted(
        [SemanticClass.ROAD, SemanticClass.BUILDING_FACADE, SemanticClass.WATER, SemanticClass.VEGETATION]
    )
    bld = next(f for f in feats if f.klass == SemanticClass.BUILDING_FACADE)
    assert bld.height_m == 15.0
    assert bld.is_polygon


# -- rasterization ------------------------------------------------------------------


def _grid_at_origin(w=128, h=128):
    x0, y0 = project_mercator(0.0, 0.001, 18)  # NW corner of a small box
    return MercatorGrid(zoom=18, origin_px=(int(x0), int(y0)), size=(w, h))


def _lonlat_of_px(grid, x, y):
    return unproject_mercator(grid.origin_px[0] + x, grid.origin_px[1] + y, grid.zoom)


def test_rasterize_empty():
    grid = _grid_at_origin(32, 32)
    layout = rasterize([], grid, PerlinField(seed=0))
    assert not layout.semantic.cells.any()
    assert not layout.heights.top_down.any()


def test_rasterize_road_height():
    grid = _grid_at_origin()
    a = _lonlat_of_px(grid, 10, 64)
    b = _lonlat_of_px(grid, 118, 64)
    road = GeoFeature((a, b), SemanticClass.ROAD, width_m=7.0)
    layout = rasterize([road], grid, PerlinField(seed=0))
    cells = layout.semantic.cells
    assert (cells == SemanticClass.ROAD).sum() > 100
    expected_td = int(round(4.0 / grid.pixel_scale))
    assert expected_td == 7
    assert (layout.heights.top_down[cells == SemanticClass.ROAD] == expected_td).all()
    assert (layout.heights.bottom_up[cells == SemanticClass.ROAD] == 0).all()
    # Stroke width ~ 7 m / 0.597 = 11.7 px: check the band thickness mid-road.
    col = cells[:, 64] == SemanticClass.ROAD
    assert 10 <= col.sum() <= 13


def test_rasterize_vegetation_heights_in_range():
    grid = _grid_at_origin()
    ring = [_lonlat_of_px(grid, x, y) for x, y in ((8, 8), (120, 8), (120, 120), (8, 120), (8, 8))]
    veg = GeoFeature(tuple(ring), SemanticClass.VEGETATION)
    layout = rasterize([veg], grid, PerlinField(seed=4))
    cells = layout.semantic.cells
    sel = cells == SemanticClass.VEGETATION
    assert sel.sum() > 1000
    td = layout.heights.top_down[sel]
    lo = int(round(8.0 / grid.pixel_scale))
    hi = int(round(16.0 / grid.pixel_scale))
    assert td.min() >= lo
    assert td.max() <= hi


def test_rasterize_water_zero_and_building_default():
    grid = _grid_at_origin()
    water_ring = [_lonlat_of_px(grid, x, y) for x, y in ((4, 4), (60, 4), (60, 60), (4, 60), (4, 4))]
    bld_ring = [_lonlat_of_px(grid, x, y) for x, y in ((70, 70), (100, 70), (100, 100), (70, 100), (70, 70))]
    layout = rasterize(
        [
            GeoFeature(tuple(water_ring), SemanticClass.WATER),
            GeoFeature(tuple(bld_ring), SemanticClass.BUILDING_FACADE),
        ],
        grid,
        PerlinField(seed=0),
    )
    cells = layout.semantic.cells
    assert (layout.heights.top_down[cells == SemanticClass.WATER] == 0).all()
    expected = int(round(DEFAULT_BUILDING_HEIGHT_M / grid.pixel_scale))
    assert (layout.heights.top_down[cells == SemanticClass.BUILDING_FACADE] == expected).all()


def test_rasterize_priority_building_over_water():
    grid = _grid_at_origin(64, 64)
    ring = [_lonlat_of_px(grid, x, y) for x, y in ((8, 8), (56, 8), (56, 56), (8, 56), (8, 8))]
    water = GeoFeature(tuple(ring), SemanticClass.WATER)
    bld = GeoFeature(tuple(ring), SemanticClass.BUILDING_FACADE, height_m=24.0)
    for order in ([water, bld], [bld, water]):
        layout = rasterize(order, grid, PerlinField(seed=0))
        sel = layout.semantic.cells[20, 20]
        assert sel == SemanticClass.BUILDING_FACADE


def test_rasterize_highway_deck_clearance():
    grid = _grid_at_origin()
    a = _lonlat_of_px(grid, 5, 30)
    b = _lonlat_of_px(grid, 120, 30)
    hw = GeoFeature((a, b), SemanticClass.HIGHWAY, width_m=10.0, deck_height_m=8.0, clearance_m=5.0)
    layout = rasterize([hw], grid, PerlinField(seed=0))
    sel = layout.semantic.cells == SemanticClass.HIGHWAY
    assert sel.any()
    assert (layout.heights.bottom_up[sel] == int(round(5.0 / grid.pixel_scale))).all()
    assert (layout.heights.top_down[sel] == int(round(8.0 / grid.pixel_scale))).all()


def test_rasterize_clips_outside_features():
    grid = _grid_at_origin(32, 32)
    far = GeoFeature(((10.0, 10.0), (10.001, 10.0)), SemanticClass.ROAD, width_m=5.0)
    layout = rasterize([far], grid, PerlinField(seed=0))
    assert not layout.semantic.cells.any()


def test_rasterize_deterministic_bytes(tmp_path):
    grid = _grid_at_origin(64, 64)
    ring = [_lonlat_of_px(grid, x, y) for x, y in ((8, 8), (50, 10), (55, 50), (6, 52), (8, 8))]
    feats = [
        GeoFeature(tuple(ring), SemanticClass.VEGETATION),
        GeoFeature((_lonlat_of_px(grid, 0, 32), _lonlat_of_px(grid, 63, 32)), SemanticClass.ROAD, width_m=6.0),
    ]
    a = rasterize(feats, grid, PerlinField(seed=9))
    b = rasterize(feats, grid, PerlinField(seed=9))
    save_layout(a, tmp_path / "a")
    save_layout(b, tmp_path / "b")
    for suf in (".sem.png", ".hbu.png", ".htd.png"):
        assert (tmp_path / ("a" + suf)).read_bytes() == (tmp_path / ("b" + suf)).read_bytes()


def test_polygon_even_odd_hole():
    """A ring-with-hole drawn as one self-touching polygon uses even-odd fill."""
    grid = _grid_at_origin(64, 64)
    outer = [(4, 4), (60, 4), (60, 60), (4, 60), (4, 4)]
    inner = [(20, 20), (44, 20), (44, 44), (20, 44), (20, 20)]
    ring = [_lonlat_of_px(grid, x, y) for x, y in outer + inner]
    layout = rasterize([GeoFeature(tuple(ring), SemanticClass.WATER)], grid, PerlinField(seed=0))
    cells = layout.semantic.cells
    assert cells[10, 10] == SemanticClass.WATER
    assert cells[32, 32] == SemanticClass.NULL  # inside the hole
