"""Kinematic traffic on the lane graph, plus the per-frame vehicle rasters.

A deterministic capped follow-the-leader simulator stands in for a learned
scenario model: its contract downstream is simply per-frame oriented vehicle
boxes. Vehicles spawn on seeded lane slots, never exceed the speed limit,
hold a bumper gap of at least one car length to their leader, and pick an
outgoing connector by seeded draw when a lane ends.

Yaw follows the paper-style convention: heading measured in the XY plane
relative to the -y axis, so theta = 0 points along (0, -1) and theta = 90
degrees along (+1, 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .hdmap import HdMap, bezier_point
from .layout import DEFAULT_PIXEL_SCALE, HeightFieldPair, SemanticMap
from .semantics import SemanticClass

SPEED_LIMIT_MS = 13.9  # 50 km/h
CAR_LENGTH_M = 4.5
CAR_WIDTH_M = 1.8
CAR_HEIGHT_M = 1.5
MIN_GAP_LENGTHS = 1.0  # bumper gap kept >= one car length
SPAWN_SPACING_LENGTHS = 2.0


@dataclass(frozen=True)
class VehicleState:
    """One vehicle at one frame; center and dims are in layout cells."""

    vid: int
    center: tuple[float, float, float]
    yaw_deg: float  # (-180, 180], heading relative to -y
    pitch_deg: float  # (-90, 90)
    dims: tuple[float, float, float]  # length, width, height in cells
    path: str  # "lane:<id>" or "connector:<id>"
    arc_m: float
    speed: float  # m/s

    def __post_init__(self):
        if not -180.0 < self.yaw_deg <= 180.0:
            raise ValueError("yaw must lie in (-180, 180]")
        if not -90.0 < self.pitch_deg < 90.0:
            raise ValueError("pitch must lie in (-90, 90)")
        if min(self.dims) <= 0:
            raise ValueError("dims must be positive")


@dataclass(frozen=True)
class TrafficScenario:
    frames: tuple[tuple[VehicleState, ...], ...]
    dt: float
    pixel_scale: float = DEFAULT_PIXEL_SCALE

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class TrafficFrameRasters:
    semantic: SemanticMap
    heights: HeightFieldPair


# -- rotation / canonicalization ----------------------------------------------


def rotation_matrix(theta_deg: float, gamma_deg: float) -> np.ndarray:
    """World-to-canonical rotation from yaw theta and pitch gamma (degrees).

    Rows: [cos t, sin t, 0; -sin t cos g, cos t cos g, sin g;
    sin t sin g, -cos t sin g, cos g].
    """
    t = math.radians(theta_deg)
    g = math.radians(gamma_deg)
    ct, st = math.cos(t), math.sin(t)
    cg, sg = math.cos(g), math.sin(g)
    return np.array(
        [
            [ct, st, 0.0],
            [-st * cg, ct * cg, sg],
            [st * sg, -ct * sg, cg],
        ]
    )


def canonicalize(p, vehicle: VehicleState) -> np.ndarray:
    """Map a world point into the vehicle's canonical frame: R (p - center)."""
    r = rotation_matrix(vehicle.yaw_deg, vehicle.pitch_deg)
    return r @ (np.asarray(p, dtype=np.float64) - np.asarray(vehicle.center))


def heading_from_tangent(tx: float, ty: float) -> float:
    """Yaw in degrees, (-180, 180], of a 2D tangent, measured from -y."""
    yaw = math.degrees(math.atan2(tx, -ty))
    if yaw <= -180.0:
        yaw += 360.0
    return yaw


# -- path geometry --------------------------------------------------------------


class _Path:
    """Arc-length parameterized 2D polyline (pixels wide, meters long)."""

    def __init__(self, key: str, points: np.ndarray, pixel_scale: float):
        self.key = key
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        seg_len = np.linalg.norm(seg, axis=1) * pixel_scale
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length_m = float(self.cum[-1])

    def sample(self, arc_m: float) -> tuple[float, float, float]:
        """(x_px, y_px, yaw_deg) at an arc position, clamped to the path."""
        arc = min(max(arc_m, 0.0), self.length_m)
        k = int(np.searchsorted(self.cum, arc, side="right") - 1)
        k = min(k, len(self.points) - 2)
        seg_len = self.cum[k + 1] - self.cum[k]
        frac = 0.0 if seg_len <= 0 else (arc - self.cum[k]) / seg_len
        p = self.points[k] + frac * (self.points[k + 1] - self.points[k])
        d = self.points[k + 1] - self.points[k]
        return float(p[0]), float(p[1]), heading_from_tangent(float(d[0]), float(d[1]))


def _connector_polyline(control: np.ndarray, samples: int = 32) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)
    return bezier_point(control, t)


class _Network:
    def __init__(self, hdmap: HdMap):
        ps = hdmap.pixel_scale
        self.pixel_scale = ps
        self.lanes = {l.id: _Path(f"lane:{l.id}", l.points, ps) for l in hdmap.graph.lanes}
        self.connectors = {}
        self.outgoing: dict[int, list[int]] = {l.id: [] for l in hdmap.graph.lanes}
        self.connector_target = {}
        for c in hdmap.graph.connectors:
            self.connectors[c.id] = _Path(f"connector:{c.id}", _connector_polyline(c.control), ps)
            self.outgoing[c.from_lane].append(c.id)
            self.connector_target[c.id] = c.to_lane

    def path(self, key: str) -> _Path:
        kind, _, sid = key.partition(":")
        return self.lanes[int(sid)] if kind == "lane" else self.connectors[int(sid)]


# -- simulation ----------------------------------------------------------------


class CapacityError(ValueError):
    def __init__(self, requested: int, capacity: int):
        super().__init__(
            f"cannot spawn {requested} vehicles: network capacity at "
            f"{SPAWN_SPACING_LENGTHS:g}-car-length spacing is {capacity}"
        )
        self.capacity = capacity


def simulate(
    hdmap: HdMap,
    n_vehicles: int,
    n_frames: int,
    dt: float,
    seed: int = 0,
    car_dims_m: tuple[float, float, float] = (CAR_LENGTH_M, CAR_WIDTH_M, CAR_HEIGHT_M),
    speed_limit: float = SPEED_LIMIT_MS,
) -> TrafficScenario:
    """Run the follow-the-leader simulation for n_frames steps of dt seconds.

    Bit-exact under a fixed seed: spawn slots, initial speeds and junction
    turns all come from one numpy generator consumed in a fixed order.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if not hdmap.graph.lanes:
        raise ValueError("HD map has no lanes to drive on")
    net = _Network(hdmap)
    ps = net.pixel_scale
    length_m = car_dims_m[0]
    spacing = SPAWN_SPACING_LENGTHS * length_m
    dims_cells = tuple(d / ps for d in car_dims_m)
    z_center = dims_cells[2] / 2.0

    lane_ids = sorted(net.lanes)
    capacity = sum(int(net.lanes[l].length_m // spacing) for l in lane_ids)
    if n_vehicles > capacity:
        raise CapacityError(n_vehicles, capacity)

    rng = np.random.default_rng(seed)
    slots: list[tuple[int, float]] = []
    for lid in lane_ids:
        lane = net.lanes[lid]
        n_slots = int(lane.length_m // spacing)
        if n_slots < 1:
            continue
        head = rng.uniform(0.0, lane.length_m - (n_slots - 1) * spacing)
        slots.extend((lid, head + k * spacing) for k in range(n_slots))
    order = rng.permutation(len(slots))[:n_vehicles]

    # Mutable per-vehicle state: [path_key, arc_m, speed]
    state: list[list] = []
    for vid, slot_idx in enumerate(order):
        lid, arc = slots[int(slot_idx)]
        speed = float(rng.uniform(0.5 * speed_limit, speed_limit))
        state.append([f"lane:{lid}", float(arc), speed])

    route_rng = np.random.default_rng((int(seed) ^ 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)

    def make_state(vid: int, st) -> VehicleState:
        path = net.path(st[0])
        x, y, yaw = path.sample(st[1])
        return VehicleState(
            vid=vid,
            center=(x, y, z_center),
            yaw_deg=yaw,
            pitch_deg=0.0,  # polylines are flat; grade would come from 3D lanes
            dims=dims_cells,
            path=st[0],
            arc_m=st[1],
            speed=st[2],
        )

    frames: list[tuple[VehicleState, ...]] = []
    frames.append(tuple(make_state(v, st) for v, st in enumerate(state)))
    for _ in range(1, n_frames):
        snapshot = [list(st) for st in state]

        def leader_arc(vid: int, path_key: str, arc: float) -> float | None:
            best = None
            for ov, ost in enumerate(snapshot):
                if ov == vid or ost[0] != path_key:
                    continue
                if ost[1] > arc and (best is None or ost[1] < best):
                    best = ost[1]
            return best

        def occupied(path_key: str, arc: float, ignore: int) -> bool:
            for ov in range(len(state)):
                for source in (state[ov], snapshot[ov]):
                    if ov != ignore and source[0] == path_key and abs(source[1] - arc) < spacing:
                        return True
            return False

        for vid, st in enumerate(state):
            path_key, arc, _ = snapshot[vid]
            path = net.path(path_key)
            advance = speed_limit * dt
            lead = leader_arc(vid, path_key, arc)
            if lead is not None:
                advance = min(advance, max(0.0, lead - spacing - arc))
            new_arc = arc + advance
            new_key = path_key
            if new_arc > path.length_m:
                leftover = new_arc - path.length_m
                if path_key.startswith("lane:"):
                    lid = int(path_key.split(":")[1])
                    options = net.outgoing[lid]
                    if options:
                        cid = options[int(route_rng.integers(0, len(options)))]
                        target = f"connector:{cid}"
                    else:
                        target = None
                else:
                    target = f"lane:{net.connector_target[int(path_key.split(':')[1])]}"
                if target is not None and not occupied(target, leftover, vid):
                    new_key, new_arc = target, min(leftover, net.path(target).length_m)
                else:
                    new_arc = path.length_m  # hold at the end of the path
                    advance = new_arc - arc
            st[0] = new_key
            st[1] = new_arc
            st[2] = advance / dt
        frames.append(tuple(make_state(v, st) for v, st in enumerate(state)))
    return TrafficScenario(tuple(frames), dt, ps)


# -- rasterization (traffic volume of a frame) ----------------------------------


def boxes_to_maps(
    frame: tuple[VehicleState, ...] | list[VehicleState],
    grid_size: tuple[int, int],
    pixel_scale: float = DEFAULT_PIXEL_SCALE,
) -> TrafficFrameRasters:
    """Rasterize oriented vehicle footprints into semantic + height maps.

    A cell is covered when its center falls inside the rotated footprint
    rectangle. Covered cells get VEHICLE with the box's vertical slab
    (rounded); overlaps resolve to the higher top-down value.
    """
    h, w = grid_size
    sem = np.zeros((h, w), dtype=np.uint8)
    bu = np.zeros((h, w), dtype=np.int32)
    td = np.zeros((h, w), dtype=np.int32)
    best_td = np.full((h, w), np.iinfo(np.int32).min, dtype=np.int64)
    for v in frame:
        cx, cy, cz = v.center
        half_l = v.dims[0] / 2.0
        half_w = v.dims[1] / 2.0
        r = math.hypot(half_l, half_w)
        j0 = max(0, int(math.floor(cx - r)))
        j1 = min(w - 1, int(math.ceil(cx + r)))
        i0 = max(0, int(math.floor(cy - r)))
        i1 = min(h - 1, int(math.ceil(cy + r)))
        if j0 > j1 or i0 > i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        dx = (jj + 0.5) - cx
        dy = (ii + 0.5) - cy
        t = math.radians(v.yaw_deg)
        hx, hy = math.sin(t), -math.cos(t)  # heading
        px, py = math.cos(t), math.sin(t)  # lateral axis
        lon = dx * hx + dy * hy
        lat = dx * px + dy * py
        cover = (np.abs(lon) <= half_l) & (np.abs(lat) <= half_w)
        v_bu = int(round(cz - v.dims[2] / 2.0))
        v_td = int(round(cz + v.dims[2] / 2.0))
        win = (slice(i0, i1 + 1), slice(j0, j1 + 1))
        take = cover & (v_td > best_td[win])
        sem[win][take] = SemanticClass.VEHICLE
        bu[win][take] = max(v_bu, 0)
        td[win][take] = max(v_td, 0)
        best_td[win][take] = v_td
    return TrafficFrameRasters(SemanticMap(sem, pixel_scale), HeightFieldPair(bu, td))


# -- serialization ---------------------------------------------------------------


def scenario_to_dict(s: TrafficScenario) -> dict:
    return {
        "dt": s.dt,
        "pixel_scale": s.pixel_scale,
        "frames": [
            [
                {
                    "id": v.vid,
                    "center": [round(c, 6) for c in v.center],
                    "yaw": round(v.yaw_deg, 6),
                    "pitch": round(v.pitch_deg, 6),
                    "dims": [round(d, 6) for d in v.dims],
                    "speed": round(v.speed, 6),
                    "path": v.path,
                    "arc": round(v.arc_m, 6),
                }
                for v in frame
            ]
            for frame in s.frames
        ],
    }


def save_scenario(s: TrafficScenario, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(scenario_to_dict(s), sort_keys=True) + "\n")
    return p


def load_scenario(path: str | Path) -> TrafficScenario:
    obj = json.loads(Path(path).read_text())
    frames = tuple(
        tuple(
            VehicleState(
                vid=v["id"],
                center=tuple(v["center"]),
                yaw_deg=v["yaw"],
                pitch_deg=v["pitch"],
                dims=tuple(v["dims"]),
                path=v.get("path", "lane:0"),
                arc_m=v.get("arc", 0.0),
                speed=v["speed"],
            )
            for v in frame
        )
        for frame in obj["frames"]
    )
    return TrafficScenario(frames, obj["dt"], obj.get("pixel_scale", DEFAULT_PIXEL_SCALE))
