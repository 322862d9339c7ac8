import math

import numpy as np
import pytest

from conftest import make_layout, random_layout

from cityforge.camera import Camera, camera_from_dict
from cityforge.compositor import LayerStack, compose
from cityforge.layout import CityLayout, HeightFieldPair, SemanticMap, extract_local_window, instantiate_buildings, isolate_instance, relabel_facade_roof
from cityforge.renderer import (
    ColumnVolume,
    RenderBuffers,
    ShadingConfig,
    _march,
    dda_traverse,
    hash_texture,
    load_buffers,
    relight,
    render_background,
    render_building,
    render_vehicle,
    save_buffers,
    shadow_map,
)
from cityforge.semantics import SemanticClass, palette_floats
from cityforge.traffic import VehicleState
from cityforge.encoders import FeatureTable, SceneFeature, hash_feature_batch


def _window_from(sem, bu, td, depth=16):
    layout = make_layout(sem, bu, td)
    h, w = layout.shape
    return extract_local_window(layout, (h // 2, w // 2), (h, w, depth))


def _ground_window(n=24, depth=16, td_val=0):
    sem = np.full((n, n), SemanticClass.ROAD, dtype=np.uint8)
    td = np.full((n, n), td_val, dtype=np.int32)
    return _window_from(sem, np.zeros((n, n), np.int32), td, depth)


# -- dda_traverse ---------------------------------------------------------------


def test_dda_axis_aligned_ten_cells():
    segs = dda_traverse((1, 10, 4), origin=(0.0, 0.5, 0.5), direction=(1.0, 0.0, 0.0), t_max=10.0)
    assert len(segs) == 10
    for k, (cell, t0, t1) in enumerate(segs):
        assert cell == (0, k, 0)
        assert t1 - t0 == pytest.approx(1.0, abs=1e-12)


def test_dda_miss_returns_empty():
    segs = dda_traverse((4, 4, 4), origin=(-5.0, -5.0, 0.5), direction=(0.0, 1.0, 0.0), t_max=50.0)
    assert segs == []


def test_dda_degenerate_direction():
    with pytest.raises(ValueError):
        dda_traverse((4, 4, 4), (0.5, 0.5, 0.5), (0.0, 0.0, 0.0), 10.0)


def test_dda_covers_clipped_length(rng):
    shape = (8, 8, 8)
    for _ in range(300):
        o = rng.uniform(-10, 18, size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        t_max = float(rng.uniform(5, 60))
        segs = dda_traverse(shape, o, d, t_max)
        # Analytic clip of [0, t_max] against the box [0,8]^3.
        t0, t1 = 0.0, t_max
        ext = (8.0, 8.0, 8.0)
        ok = True
        for ax in range(3):
            if d[ax] == 0.0:
                if not (0 <= o[ax] < ext[ax]):
                    ok = False
                continue
            ta, tb = (0 - o[ax]) / d[ax], (ext[ax] - o[ax]) / d[ax]
            t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
        expect = max(0.0, t1 - t0) if ok else 0.0
        total = sum(b - a for _, a, b in segs)
        assert total == pytest.approx(expect, abs=1e-9)
        # Gap-free and ordered.
        for (_, a0, b0), (_, a1, b1) in zip(segs[:-1], segs[1:]):
            assert b0 == pytest.approx(a1, abs=1e-9)
            assert b0 <= a1 + 1e-9


def test_march_matches_dda_on_random_volumes(rng):
    """Column-slab marching equals 3D DDA + per-cell lookup (merged in z)."""
    for trial in range(20):
        layout = random_layout(rng, 8, 8, max_height=6)
        win = extract_local_window(layout, (4, 4), (8, 8, 8))
        vol = ColumnVolume.from_window(win)
        o = rng.uniform(-4, 12, size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        segs = _march(vol, o.reshape(1, 3) + vol.origin, d.reshape(1, 3), 60.0, sigma=1e-9)
        got = sorted(zip(segs[1], segs[2], segs[3]))
        # Oracle: 3D traversal, keep occupied cells, merge contiguous runs.
        cells = dda_traverse((8, 8, 8), o, d, 60.0)
        merged = []
        for (i, j, k), a, b in cells:
            klass = win.lookup(i, j, k)
            if klass == 0:
                continue
            if merged and abs(merged[-1][1] - a) < 1e-9 and merged[-1][2] == klass:
                merged[-1] = (merged[-1][0], b, klass)
            else:
                merged.append((a, b, klass))
        assert len(got) == len(merged)
        for (ga, gb, gk), (ma, mb, mk) in zip(got, merged):
            assert ga == pytest.approx(ma, abs=1e-9)
            assert gb == pytest.approx(mb, abs=1e-9)
            assert gk == mk


# -- quadrature & energy -----------------------------------------------------------


def _single_ray_camera(position, target):
    return Camera.look_at(position=position, target=target, fx=1.0, width=1, height=1, cx=0.5, cy=0.5)


def _two_cell_scene():
    """Two occupied columns; ray enters mid-cell so segment lengths differ."""
    sem = np.array([[1, 5]], dtype=np.uint8)
    bu = np.zeros((1, 2), dtype=np.int32)
    td = np.zeros((1, 2), dtype=np.int32)
    return _window_from(sem, bu, td, depth=1)


@pytest.mark.parametrize("sigma", [2.0, 20.0])
def test_two_segment_weights_match_quadrature(sigma):
    win = _two_cell_scene()
    cam = _single_ray_camera((0.3, 0.5, 0.5), (5.0, 0.5, 0.5))
    palette = np.zeros((9, 3))
    palette[1] = (1.0, 0.0, 0.0)  # first cell's class -> red channel
    palette[5] = (0.0, 1.0, 0.0)  # second cell's class -> green channel
    shading = ShadingConfig(sigma=sigma, sky_color=(0.0, 0.0, 0.0), texture_amp=0.0, palette=palette)
    buf = render_background(win, cam, shading)
    w1, w2 = float(buf.color[0, 0, 0]), float(buf.color[0, 0, 1])
    l1, l2 = 0.7, 1.0
    assert w1 == pytest.approx(1.0 - math.exp(-sigma * l1), abs=1e-9)
    assert w2 == pytest.approx(math.exp(-sigma * l1) * (1.0 - math.exp(-sigma * l2)), abs=1e-9)
    # 1e4-step midpoint quadrature of the transmittance integral.
    n = 10_000
    dt = (l1 + l2) / n
    ts = (np.arange(n) + 0.5) * dt
    sig = np.full(n, sigma)
    tau_mid = np.cumsum(sig * dt) - sig * dt / 2.0  # optical depth at step midpoints
    w_num = np.exp(-tau_mid) * sig * dt
    q1 = float(w_num[ts < l1].sum())
    q2 = float(w_num[ts >= l1].sum())
    assert w1 == pytest.approx(q1, abs=1e-4)
    assert w2 == pytest.approx(q2, abs=1e-4)


def test_opaque_cell_alpha():
    win = _ground_window(8, depth=4)
    cam = _single_ray_camera((4.0, 4.0, 20.0), (4.0, 4.0, 0.0))
    shading = ShadingConfig(sigma=20.0)
    buf = render_background(win, cam, shading)
    assert buf.alpha[0, 0] == pytest.approx(1.0 - math.exp(-20.0), abs=1e-9)
    assert buf.semantic[0, 0] == SemanticClass.ROAD
    assert np.isfinite(buf.depth[0, 0])


def test_empty_window_renders_sky():
    sem = np.zeros((8, 8), dtype=np.uint8)
    win = _window_from(sem, sem.astype(np.int32), sem.astype(np.int32), depth=8)
    cam = Camera.look_at((4.0, 4.0, 20.0), (4.0, 4.0, 0.0), fx=30.0, width=16, height=16)
    shading = ShadingConfig()
    buf = render_background(win, cam, shading)
    assert (buf.alpha == 0).all()
    assert np.isinf(buf.depth).all()
    assert (buf.semantic == 0).all()
    np.testing.assert_allclose(buf.color, np.broadcast_to(shading.sky_color, buf.color.shape), atol=1e-12)


def test_energy_identity_random_scene(rng):
    layout = random_layout(rng, 24, 24, max_height=10)
    win = extract_local_window(layout, (12, 12), (24, 24, 16))
    cam = Camera.look_at((5.0, -8.0, 22.0), (12.0, 12.0, 0.0), fx=40.0, width=32, height=24)
    buf = render_background(win, cam, ShadingConfig())
    assert buf.energy_error < 1e-9


def test_buffer_invariant_alpha_semantic_depth(rng):
    layout = random_layout(rng, 16, 16, max_height=8)
    win = extract_local_window(layout, (8, 8), (16, 16, 12))
    cam = Camera.look_at((-4.0, -4.0, 14.0), (8.0, 8.0, 0.0), fx=30.0, width=24, height=24)
    buf = render_background(win, cam, ShadingConfig())
    zero = buf.alpha == 0.0
    np.testing.assert_array_equal(zero, buf.semantic == 0)
    np.testing.assert_array_equal(zero, np.isinf(buf.depth))


def test_background_determinism(rng):
    layout = random_layout(rng, 16, 16, max_height=8)
    win = extract_local_window(layout, (8, 8), (16, 16, 12))
    cam = Camera.look_at((-4.0, -4.0, 14.0), (8.0, 8.0, 0.0), fx=30.0, width=20, height=16)
    a = render_background(win, cam, ShadingConfig(style_seed=5))
    b = render_background(win, cam, ShadingConfig(style_seed=5))
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_background_excludes_buildings():
    sem = np.full((8, 8), SemanticClass.ROAD, dtype=np.uint8)
    sem[3:5, 3:5] = SemanticClass.BUILDING_FACADE
    td = np.zeros((8, 8), dtype=np.int32)
    td[3:5, 3:5] = 6
    win = _window_from(sem, np.zeros((8, 8), np.int32), td, depth=8)
    cam = _single_ray_camera((3.5, 3.5, 20.0), (3.5, 3.5, 0.0))  # straight down at the building
    buf = render_background(win, cam, ShadingConfig())
    # The building occludes (ray absorbed) but contributes nothing visible.
    assert buf.alpha[0, 0] == 0.0
    assert buf.semantic[0, 0] == 0
    assert np.isinf(buf.depth[0, 0])
    assert buf.energy_error < 1e-9


def test_texture_jitter_matches_hash_feature_slice(rng):
    win = _ground_window(16, depth=8)
    from cityforge.encoders import scene_feature_global

    f = scene_feature_global(win, seed=3)
    table = FeatureTable(3)
    pts = rng.uniform(0, 16, size=(40, 3))
    fast = hash_texture(pts, f, table)
    full = hash_feature_batch(pts, f, table)
    slow = full[:, 0 :: table.config.channels].mean(axis=1)
    np.testing.assert_allclose(fast, slow, atol=1e-12)


# -- buildings ---------------------------------------------------------------------


def _building_scene():
    sem = np.zeros((16, 16), dtype=np.uint8)
    sem[6:10, 6:10] = SemanticClass.BUILDING_FACADE
    td = np.zeros((16, 16), dtype=np.int32)
    td[6:10, 6:10] = 8
    layout = make_layout(sem, np.zeros((16, 16), np.int32), td)
    inst = instantiate_buildings(layout.semantic)
    win = extract_local_window(layout, (8, 8), (16, 16, 12))
    win = isolate_instance(win, inst, 1)
    return relabel_facade_roof(win, 1)


def test_building_side_view_all_facade():
    win = _building_scene()
    # Narrow FOV below the roof layer: only wall cells are in frame.
    cam = Camera.look_at((8.0, -10.0, 4.0), (8.0, 8.0, 4.0), fx=60.0, width=24, height=24)
    buf = render_building(win, (8.0, 8.0), cam, ShadingConfig(), style_seed=1)
    sel = buf.alpha > 0.5
    assert sel.any()
    classes = set(np.unique(buf.semantic[sel]))
    assert classes == {int(SemanticClass.BUILDING_FACADE)}
    assert (buf.instance[sel] == 1).all()


def test_building_top_down_all_roof():
    win = _building_scene()
    cam = Camera.look_at((8.0, 8.0, 40.0), (8.0, 8.0, 0.0), fx=30.0, width=24, height=24)
    buf = render_building(win, (8.0, 8.0), cam, ShadingConfig(), style_seed=1)
    sel = buf.alpha > 0.5
    assert sel.any()
    assert set(np.unique(buf.semantic[sel])) == {int(SemanticClass.BUILDING_ROOF)}


def test_building_style_changes_color_not_geometry():
    win = _building_scene()
    cam = Camera.look_at((20.0, -6.0, 10.0), (8.0, 8.0, 4.0), fx=30.0, width=32, height=32)
    a = render_building(win, (8.0, 8.0), cam, ShadingConfig(), style_seed=1)
    b = render_building(win, (8.0, 8.0), cam, ShadingConfig(), style_seed=2)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.depth, b.depth)
    np.testing.assert_array_equal(a.semantic, b.semantic)
    np.testing.assert_array_equal(a.instance, b.instance)
    assert not np.array_equal(a.color, b.color)


def test_building_requires_relabel():
    sem = np.zeros((8, 8), dtype=np.uint8)
    win = _window_from(sem, sem.astype(np.int32), sem.astype(np.int32))
    cam = _single_ray_camera((0, 0, 10), (4, 4, 0))
    with pytest.raises(ValueError):
        render_building(win, (4.0, 4.0), cam, ShadingConfig())


def test_building_recentering_identity():
    """Recentered-ray render equals the translated window + untranslated ray."""
    from dataclasses import replace

    win = _building_scene()
    cam_a = Camera.look_at((20.0, -6.0, 10.0), (8.0, 8.0, 4.0), fx=30.0, width=24, height=24)
    buf_a = render_building(win, (8.0, 8.0), cam_a, ShadingConfig(), style_seed=7)
    # Translate the window and the ray origin by -(cx, cy, 0) and drop the
    # recenter: r(t) = o + tv - [c] is then literally the same ray.
    win_b = replace(win, origin=(win.origin[0] - 8, win.origin[1] - 8))
    cam_b = Camera.look_at((20.0 - 8.0, -6.0 - 8.0, 10.0), (0.0, 0.0, 4.0), fx=30.0, width=24, height=24)
    buf_b = render_building(win_b, (0.0, 0.0), cam_b, ShadingConfig(), style_seed=7)
    np.testing.assert_allclose(buf_a.color, buf_b.color, atol=1e-9)
    np.testing.assert_allclose(buf_a.depth[np.isfinite(buf_a.depth)], buf_b.depth[np.isfinite(buf_b.depth)], atol=1e-9)
    np.testing.assert_array_equal(buf_a.semantic, buf_b.semantic)


# -- vehicles -----------------------------------------------------------------------


def _vehicle(center=(16.0, 16.0, 1.25), yaw=34.0):
    return VehicleState(3, center, yaw, 0.0, (7.5, 3.0, 2.5), "lane:0", 0.0, 0.0)


def test_vehicle_render_and_instance():
    v = _vehicle()
    cam = Camera.look_at((16.0, -10.0, 12.0), (16.0, 16.0, 1.0), fx=40.0, width=32, height=32)
    buf = render_vehicle(v, cam, ShadingConfig(), style_seed=4)
    sel = buf.alpha > 0.5
    assert sel.any()
    assert set(np.unique(buf.semantic[sel])) == {int(SemanticClass.VEHICLE)}
    assert (buf.instance[sel] == v.vid + 1).all()


def test_vehicle_behind_camera_empty():
    v = _vehicle()
    cam = Camera.look_at((16.0, -10.0, 12.0), (16.0, -40.0, 12.0), fx=40.0, width=16, height=16)
    buf = render_vehicle(v, cam, ShadingConfig(), style_seed=4)
    assert not (buf.alpha > 0).any()


def test_vehicle_rotation_equivariance():
    """Vehicle rotated 90 deg with a co-rotated camera renders identically."""
    c = np.array([16.0, 16.0, 1.25])
    va = _vehicle(center=tuple(c), yaw=34.0)
    vb = _vehicle(center=tuple(c), yaw=124.0)
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    pos_a = np.array([30.0, 4.0, 9.0])
    pos_b = rot @ (pos_a - c) + c
    cam_a = Camera.look_at(pos_a, tuple(c), fx=40.0, width=24, height=24)
    cam_b = Camera.look_at(pos_b, tuple(c), fx=40.0, width=24, height=24)
    buf_a = render_vehicle(va, cam_a, ShadingConfig(), style_seed=9)
    buf_b = render_vehicle(vb, cam_b, ShadingConfig(), style_seed=9)
    np.testing.assert_allclose(buf_a.alpha, buf_b.alpha, atol=1e-9)
    np.testing.assert_allclose(buf_a.color, buf_b.color, atol=1e-7)
    np.testing.assert_allclose(
        np.where(np.isfinite(buf_a.depth), buf_a.depth, -1),
        np.where(np.isfinite(buf_b.depth), buf_b.depth, -1),
        atol=1e-7,
    )


def test_vehicle_translation_identity():
    """Identity pose: canonicalization is a pure translation."""
    va = _vehicle(center=(16.0, 16.0, 1.25), yaw=0.0)
    vb = _vehicle(center=(48.0, 16.0, 1.25), yaw=0.0)
    cam_a = Camera.look_at((16.0, -8.0, 10.0), (16.0, 16.0, 1.0), fx=40.0, width=24, height=24)
    cam_b = Camera.look_at((48.0, -8.0, 10.0), (48.0, 16.0, 1.0), fx=40.0, width=24, height=24)
    buf_a = render_vehicle(va, cam_a, ShadingConfig(), style_seed=2)
    buf_b = render_vehicle(vb, cam_b, ShadingConfig(), style_seed=2)
    np.testing.assert_allclose(buf_a.color, buf_b.color, atol=1e-9)
    np.testing.assert_allclose(buf_a.alpha, buf_b.alpha, atol=1e-12)


# -- shadows & relighting --------------------------------------------------------------


def test_shadow_open_ground_fully_lit():
    win = _ground_window(16, depth=8)
    vol = ColumnVolume.from_window(win)
    query = shadow_map(vol, (0.0, 0.0, 1.0))
    pts = np.array([[x + 0.5, y + 0.5, 1.2] for x in range(0, 16, 3) for y in range(0, 16, 3)])
    vis = query(pts)
    assert (vis == 1.0).all()


def test_shadow_building_blocks_light():
    sem = np.full((16, 16), SemanticClass.ROAD, dtype=np.uint8)
    sem[8:11, 6:10] = SemanticClass.BUILDING_FACADE
    td = np.zeros((16, 16), dtype=np.int32)
    td[8:11, 6:10] = 10
    win = _window_from(sem, np.zeros((16, 16), np.int32), td, depth=12)
    vol = ColumnVolume.from_window(win)
    # Light from the south (+y toward -y): a point just north of the building.
    light = np.array([0.0, 1.0, 0.35])
    light = light / np.linalg.norm(light)
    query = shadow_map(vol, light)
    shadowed = query(np.array([[8.0, 6.5, 1.2]]))
    assert shadowed[0] == 0.0
    lit = query(np.array([[2.0, 2.0, 1.2]]))
    assert lit[0] == 1.0


def test_shadow_matches_bruteforce_oracle(rng):
    layout = random_layout(rng, 12, 12, max_height=8, classes=(0, 1, 3))
    win = extract_local_window(layout, (6, 6), (12, 12, 10))
    vol = ColumnVolume.from_window(win)
    light = np.array([0.3, 0.45, 0.85])
    light = light / np.linalg.norm(light)
    query = shadow_map(vol, light)
    pts = []
    for i in range(12):
        for j in range(12):
            z = win.heights.top_down[i, j] + 1.02 if win.semantic.cells[i, j] else 0.02
            pts.append((j + 0.37, i + 0.61, z))
    pts = np.array(pts)
    got = query(pts)
    # Fine-sampled ray oracle: 2000 steps out to the volume diagonal.
    steps = np.linspace(1e-3, vol.diagonal * 1.2, 2000)
    expect = np.ones(len(pts))
    for n, p in enumerate(pts):
        q = p[None, :] + steps[:, None] * light[None, :]
        jj = np.floor(q[:, 0]).astype(int)
        ii = np.floor(q[:, 1]).astype(int)
        kk = np.floor(q[:, 2]).astype(int)
        inside = (jj >= 0) & (jj < 12) & (ii >= 0) & (ii < 12) & (kk >= 0)
        occ = np.zeros(len(steps), dtype=bool)
        sel = np.nonzero(inside)[0]
        for s in sel:
            occ[s] = win.lookup(int(ii[s]), int(jj[s]), int(kk[s])) != 0
        if occ.any():
            expect[n] = 0.0
    mismatches = int((got != expect).sum())
    assert mismatches <= max(1, int(0.005 * len(pts)))


def test_relight_full_light_and_shadow():
    albedo = np.ones((2, 2, 3)) * 0.8
    normal = np.zeros((2, 2, 3))
    normal[:, :, 2] = 1.0  # facing up
    buffers = RenderBuffers(
        color=albedo.copy(),
        semantic=np.full((2, 2), 1, dtype=np.uint8),
        instance=np.zeros((2, 2), dtype=np.int32),
        depth=np.full((2, 2), 5.0),
        alpha=np.ones((2, 2)),
        normal=normal,
        hit_t=np.full((2, 2), 5.0),
    )
    cam = Camera.look_at((1.0, 1.0, 10.0), (1.0, 1.0, 0.0), fx=2.0, width=2, height=2)
    # Empty occluder volume: visibility 1 everywhere.
    empty = ColumnVolume(
        semantic=np.zeros((4, 4), dtype=np.uint8),
        bottom_up=np.zeros((4, 4), dtype=np.int32),
        top_down=np.zeros((4, 4), dtype=np.int32),
        depth=4,
        origin=np.zeros(3),
    )
    out = relight(buffers, empty, ShadingConfig(light_dir=(0, 0, 1), ambient=0.2), cam)
    np.testing.assert_allclose(out, albedo, atol=1e-9)  # n.l = 1, vis = 1
    # Fully occluded: a solid slab high above.
    solid = ColumnVolume(
        semantic=np.full((40, 40), 1, dtype=np.uint8),
        bottom_up=np.full((40, 40), 8, dtype=np.int32),
        top_down=np.full((40, 40), 9, dtype=np.int32),
        depth=12,
        origin=np.array([-20.0, -20.0, 0.0]),
    )
    out2 = relight(buffers, solid, ShadingConfig(light_dir=(0, 0, 1), ambient=0.2), cam)
    np.testing.assert_allclose(out2, albedo * 0.2, atol=1e-9)


def test_relight_monotone_in_incidence(rng):
    """A height mound: shading scales with n . l among lit, same-albedo pixels."""
    n = 24
    sem = np.full((n, n), SemanticClass.ROAD, dtype=np.uint8)
    ii, jj = np.mgrid[0:n, 0:n]
    td = np.maximum(0, 8 - ((ii - 12) ** 2 + (jj - 12) ** 2) // 12).astype(np.int32)
    win = _window_from(sem, np.zeros((n, n), np.int32), td, depth=12)
    cam = Camera.look_at((12.0, 12.0, 40.0), (12.0, 12.0, 0.0), fx=30.0, width=24, height=24)
    palette = np.ones((9, 3)) * 0.5
    palette[0] = 0.0
    shading = ShadingConfig(light_dir=(0.5, 0.2, 0.84), texture_amp=0.0, palette=palette)
    buf = render_background(win, cam, shading)
    vol = ColumnVolume.from_window(win)
    out = relight(buf, vol, shading, cam)
    light = np.asarray(shading.light_dir)
    lamb = np.einsum("ijk,k->ij", buf.normal, light)
    # Lit limb: covered pixels that face the light and are not shadowed.
    origin, dirs = cam.rays()
    hit = np.isfinite(buf.hit_t.reshape(-1))
    pts = origin[None, :] + dirs[hit] * buf.hit_t.reshape(-1)[hit][:, None]
    pts = pts + buf.normal.reshape(-1, 3)[hit] * 1e-3 + light[None, :] * 1e-3
    vis = np.zeros(buf.alpha.size)
    vis[hit] = shadow_map(vol, light)(pts)
    lit = (buf.alpha > 0.5) & (lamb > 0) & (vis.reshape(buf.alpha.shape) == 1.0)
    assert lit.sum() > 20
    vals = out[:, :, 0][lit] / buf.color[:, :, 0][lit]
    order = np.argsort(lamb[lit])
    diffs = np.diff(vals[order])
    assert (diffs >= -1e-9).all()  # exactly monotone in n . l when visible


# -- buffer IO ---------------------------------------------------------------------------


def test_buffer_png_roundtrip(tmp_path, rng):
    layout = random_layout(rng, 16, 16, max_height=8)
    win = extract_local_window(layout, (8, 8), (16, 16, 12))
    cam = Camera.look_at((-4.0, -4.0, 14.0), (8.0, 8.0, 0.0), fx=30.0, width=20, height=16)
    buf = render_background(win, cam, ShadingConfig())
    paths = save_buffers(buf, tmp_path)
    assert sorted(p.name for p in paths) == ["alpha.png", "color.png", "depth.png", "instance.png", "semantic.png"]
    loaded = load_buffers(tmp_path)
    np.testing.assert_array_equal(loaded.semantic, buf.semantic)
    np.testing.assert_array_equal(loaded.instance, buf.instance)
    np.testing.assert_array_equal(np.isinf(loaded.depth), np.isinf(buf.depth))
    fin = np.isfinite(buf.depth)
    assert np.abs(loaded.depth[fin] - np.clip(np.round(buf.depth[fin]), 1, 65535)).max() == 0
    assert np.abs(loaded.color - buf.color).max() <= 1.0 / 255.0 + 1e-12


def test_depth_zero_sentinel(tmp_path):
    sem = np.zeros((4, 4), dtype=np.uint8)
    win = _window_from(sem, sem.astype(np.int32), sem.astype(np.int32), depth=4)
    cam = Camera.look_at((2.0, 2.0, 10.0), (2.0, 2.0, 0.0), fx=4.0, width=4, height=4)
    buf = render_background(win, cam, ShadingConfig())
    save_buffers(buf, tmp_path)
    from PIL import Image

    depth_png = np.asarray(Image.open(tmp_path / "depth.png"))
    assert (depth_png == 0).all()  # all misses -> sentinel 0


# -- multi-view consistency (small) ----------------------------------------------------


def reprojection_agreement(buf_a, cam_a, buf_b, cam_b, tol=1.0):
    """Fraction of co-visible pixels whose depths agree within tol cells.

    Co-visible: finite in both views and not occluded in view B (a nearer
    surface in B hides the point A saw; those pixels are not mutually
    visible and are excluded, as in standard multi-view depth checks).
    """
    o_a, dirs_a = cam_a.rays()
    depth_a = buf_a.depth.reshape(-1)
    valid = np.isfinite(depth_a)
    pts = o_a[None, :] + dirs_a[valid] * depth_a[valid][:, None]
    u, v, z = cam_b.project(pts)
    inside = (z > 0) & (u >= 0) & (u < cam_b.width) & (v >= 0) & (v < cam_b.height)
    ui = u[inside].astype(int)
    vi = v[inside].astype(int)
    d_b = buf_b.depth[vi, ui]
    expected = np.linalg.norm(pts[inside] - cam_b.position, axis=1)
    both = np.isfinite(d_b)
    occluded = both & (expected - d_b > tol)
    covis = both & ~occluded
    err = np.abs(d_b[covis] - expected[covis])
    return float((err <= tol).mean()), int(covis.sum())


def test_depth_reprojection_two_views():
    # Smooth rolling terrain: a realistic single-valued surface.
    n = 48
    ii, jj = np.mgrid[0:n, 0:n]
    td = (4 + 2 * np.sin(ii / 7.0) + 2 * np.cos(jj / 9.0)).astype(np.int32)
    sem = np.full((n, n), SemanticClass.ROAD, dtype=np.uint8)
    win = _window_from(sem, np.zeros((n, n), np.int32), td, depth=16)
    cam_a = Camera.look_at((24.0, -26.0, 38.0), (24.0, 24.0, 0.0), fx=110.0, width=96, height=72)
    cam_b = Camera.look_at((2.0, -18.0, 38.0), (24.0, 24.0, 0.0), fx=110.0, width=96, height=72)
    shading = ShadingConfig()
    buf_a = render_background(win, cam_a, shading)
    buf_b = render_background(win, cam_b, shading)
    frac, n_covis = reprojection_agreement(buf_a, cam_a, buf_b, cam_b)
    assert n_covis > 1000
    assert frac >= 0.95
