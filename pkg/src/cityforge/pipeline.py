"""End-to-end orchestration: ingest -> hdmap -> simulate -> render -> compose.

Each stage reads file artifacts, writes its outputs atomically (temp file +
rename) and records sha256 checksums in a manifest, so a finished stage can
be skipped on re-runs when its outputs still match. One config plus its seeds
fully determines every output byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import Camera, camera_from_dict, load_camera
from .compositor import LayerStack, compose, orbit_cameras
from .encoders import splitmix64
from .hdmap import build_hdmap, load_hdmap, save_hdmap
from .ingest import parse_features, rasterize
from .layout import (
    CityLayout,
    InstanceMap,
    extract_local_window,
    instantiate_buildings,
    isolate_instance,
    load_layout,
    relabel_facade_roof,
    save_layout,
)
from .mercator import MercatorGrid
from .perlin import PerlinField
from .renderer import (
    ColumnVolume,
    RenderBuffers,
    ShadingConfig,
    relight,
    render_background,
    render_building,
    render_vehicle,
    save_buffers,
)
from .traffic import boxes_to_maps, load_scenario, save_scenario, simulate


class ConfigError(ValueError):
    """Bad or missing configuration (exit code 2)."""


class DependencyError(RuntimeError):
    """An upstream artifact is missing (exit code 3)."""


class DataError(RuntimeError):
    """Input data failed to parse or validate (exit code 4)."""


PROFILES = {
    "googleearth": {"bg_window": (1536, 1536, 640), "building_window": (672, 672, 640), "vehicle_window": 32},
    "citytopia": {"bg_window": (3072, 3072, 2560), "building_window": (768, 768, 2560), "vehicle_window": 32},
}

STAGES = ("ingest", "hdmap", "simulate", "render", "compose")


@dataclass
class RunConfig:
    """Flat per-stage configuration; CLI flags override file values."""

    features: str | None = None
    bbox: tuple[float, float, float, float] | None = None
    zoom: int = 18
    layout: str = "out/layout"
    map: str = "out/map.json"
    scenario: str = "out/scenario.json"
    out_dir: str = "out/render"
    vehicles: int = 8
    frames: int = 30
    dt: float = 0.1
    frame: int = 0
    seed_layout: int = 0
    seed_traffic: int = 0
    seed_style: int = 0
    camera: dict | None = None
    camera_file: str | None = None
    profile: str = "googleearth"
    bg_window: tuple[int, int, int] | None = None
    building_window: tuple[int, int, int] | None = None
    relight: bool = False
    light: tuple[float, float, float] = (0.35, 0.25, 0.9)
    ambient: float = 0.2
    styles: str | None = None
    threads: int = 1

    @staticmethod
    def from_file(path: str | Path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**data)
        if cfg.profile not in PROFILES:
            raise ConfigError(f"unknown profile {cfg.profile!r}; choose from {sorted(PROFILES)}")
        for key in ("bbox", "bg_window", "building_window", "light"):
            v = getattr(cfg, key)
            if v is not None:
                setattr(cfg, key, tuple(v))
        return cfg

    def window_sizes(self) -> tuple[tuple[int, int, int], tuple[int, int, int], int]:
        prof = PROFILES[self.profile]
        bg = self.bg_window or prof["bg_window"]
        bld = self.building_window or prof["building_window"]
        return tuple(bg), tuple(bld), prof["vehicle_window"]


# -- manifest & atomic IO -------------------------------------------------------


def file_checksum(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _publish(tmp_dir: Path, final_dir: Path) -> list[Path]:
    """Move every file produced under tmp_dir to the same layout under final_dir."""
    out = []
    for src in sorted(tmp_dir.rglob("*")):
        if not src.is_file():
            continue
        dst = final_dir / src.relative_to(tmp_dir)
        dst.parent.mkdir(parents=True, exist_ok=True)
        os.replace(src, dst)
        out.append(dst)
    return out


def write_manifest(path: str | Path, cfg: RunConfig, outputs: dict[str, str], stages: list[str]) -> dict:
    manifest = {
        "config_hash": config_hash(cfg),
        "seeds": {"layout": cfg.seed_layout, "traffic": cfg.seed_traffic, "style": cfg.seed_style},
        "stages": stages,
        "outputs": outputs,
    }
    atomic_write_text(Path(path), json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


# -- stages ----------------------------------------------------------------------


def stage_ingest(cfg: RunConfig) -> list[Path]:
    if not cfg.features:
        raise ConfigError("ingest needs a features file")
    if not Path(cfg.features).exists():
        raise DependencyError(f"features file {cfg.features} not found")
    if not cfg.bbox or len(cfg.bbox) != 4:
        raise ConfigError("ingest needs --bbox lon0,lat0,lon1,lat1")
    try:
        features = parse_features(cfg.features)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    try:
        grid = MercatorGrid.from_bbox(*cfg.bbox, cfg.zoom)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    perlin = PerlinField(seed=cfg.seed_layout)
    layout = rasterize(features, grid, perlin)
    base = Path(cfg.layout)
    with tempfile.TemporaryDirectory(dir=_parent_dir(base)) as tmp:
        save_layout(layout, Path(tmp) / base.name)
        return _publish(Path(tmp), base.parent)


def _parent_dir(path: Path) -> Path:
    p = path.parent
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require_layout(cfg: RunConfig) -> CityLayout:
    sem_path = Path(cfg.layout).with_name(Path(cfg.layout).name + ".sem.png")
    if not sem_path.exists():
        raise DependencyError(f"layout {cfg.layout} missing; run the ingest stage first")
    try:
        return load_layout(cfg.layout)
    except Exception as exc:
        raise DataError(f"layout {cfg.layout} failed to load: {exc}") from exc


def stage_hdmap(cfg: RunConfig) -> list[Path]:
    layout = _require_layout(cfg)
    hd = build_hdmap(layout)
    target = Path(cfg.map)
    with tempfile.TemporaryDirectory(dir=_parent_dir(target)) as tmp:
        save_hdmap(hd, Path(tmp) / target.name)
        return _publish(Path(tmp), target.parent)


def stage_simulate(cfg: RunConfig) -> list[Path]:
    if not Path(cfg.map).exists():
        raise DependencyError(f"HD map {cfg.map} missing; run the hdmap stage first")
    try:
        hd = load_hdmap(cfg.map)
    except Exception as exc:
        raise DataError(f"HD map {cfg.map} failed to load: {exc}") from exc
    try:
        scenario = simulate(hd, cfg.vehicles, cfg.frames, cfg.dt, seed=cfg.seed_traffic)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    target = Path(cfg.scenario)
    with tempfile.TemporaryDirectory(dir=_parent_dir(target)) as tmp:
        save_scenario(scenario, Path(tmp) / target.name)
        return _publish(Path(tmp), target.parent)


def _camera_for(cfg: RunConfig) -> Camera:
    if cfg.camera_file:
        if not Path(cfg.camera_file).exists():
            raise DependencyError(f"camera file {cfg.camera_file} not found")
        return load_camera(cfg.camera_file)
    if cfg.camera:
        return camera_from_dict(cfg.camera)
    raise ConfigError("no camera given (camera dict or camera_file)")


def _style_overrides(cfg: RunConfig) -> dict:
    if not cfg.styles:
        return {"building": {}, "vehicle": {}}
    try:
        data = json.loads(Path(cfg.styles).read_text())
    except FileNotFoundError:
        return {"building": {}, "vehicle": {}}
    except json.JSONDecodeError as exc:
        raise DataError(f"styles file {cfg.styles}: {exc}") from exc
    return {"building": data.get("building", {}), "vehicle": data.get("vehicle", {})}


def instance_style_seed(style_seed: int, kind: str, instance_id: int) -> int:
    tag = 0xB1 if kind == "building" else 0x7E
    return int(splitmix64(np.uint64((style_seed & 0xFFFFFFFFFFFFFFFF) ^ (instance_id << 8) ^ tag)))


def render_frame(
    layout: CityLayout,
    scenario_frame,
    camera: Camera,
    cfg: RunConfig,
    instances: InstanceMap | None = None,
) -> tuple[RenderBuffers, LayerStack]:
    """Render background + every building and vehicle, then compose."""
    bg_size, bld_size, veh_size = cfg.window_sizes()
    shading = ShadingConfig(light_dir=cfg.light, ambient=cfg.ambient, style_seed=cfg.seed_style)
    # Center the window where the camera's forward ray meets the ground plane.
    fwd = camera.rotation[:, 2]
    if fwd[2] < -1e-6:
        target = camera.position + fwd * (-camera.position[2] / fwd[2])
    else:
        target = camera.position + fwd * 10.0
    center = (int(round(target[1])), int(round(target[0])))
    window = extract_local_window(layout, center, bg_size)
    background = render_background(window, camera, shading)

    styles = _style_overrides(cfg)
    if instances is None:
        instances = instantiate_buildings(layout.semantic)
    buildings = []
    if instances.count:
        centroids = ndimage.center_of_mass(
            instances.labels > 0, instances.labels, range(1, instances.count + 1)
        )
        for bid in range(1, instances.count + 1):
            ci, cj = centroids[bid - 1]
            bwin = extract_local_window(layout, (int(round(ci)), int(round(cj))), bld_size)
            bwin = isolate_instance(bwin, instances, bid)
            bwin = relabel_facade_roof(bwin, bid)
            seed = styles["building"].get(str(bid))
            seed = int(seed) if seed is not None else instance_style_seed(cfg.seed_style, "building", bid)
            buildings.append(render_building(bwin, (float(cj), float(ci)), camera, shading, style_seed=seed))
    vehicles = []
    for v in scenario_frame or ():
        seed = styles["vehicle"].get(str(v.vid))
        seed = int(seed) if seed is not None else instance_style_seed(cfg.seed_style, "vehicle", v.vid)
        vehicles.append(
            render_vehicle(v, camera, shading, style_seed=seed, pixel_scale=layout.pixel_scale, window_size=veh_size)
        )
    stack = LayerStack(background, buildings, vehicles)
    composed = compose(stack, sky_color=shading.sky_color)
    if cfg.relight:
        occluders = [ColumnVolume.from_window(window)]
        if scenario_frame:
            rasters = boxes_to_maps(scenario_frame, layout.shape, layout.pixel_scale)
            tl = CityLayout(rasters.semantic, rasters.heights)
            occluders.append(ColumnVolume.from_window(extract_local_window(tl, center, bg_size)))
        composed.color = relight(composed, occluders, shading, camera)
    return composed, stack


def stage_render(cfg: RunConfig) -> list[Path]:
    layout = _require_layout(cfg)
    camera = _camera_for(cfg)
    frame_states = ()
    if cfg.vehicles > 0:
        if not Path(cfg.scenario).exists():
            raise DependencyError(f"scenario {cfg.scenario} missing; run the simulate stage first")
        scenario = load_scenario(cfg.scenario)
        if cfg.frame >= scenario.n_frames:
            raise DataError(f"frame {cfg.frame} out of range (scenario has {scenario.n_frames})")
        frame_states = scenario.frames[cfg.frame]
    composed, stack = render_frame(layout, frame_states, camera, cfg)
    out_dir = Path(cfg.out_dir)
    with tempfile.TemporaryDirectory(dir=_parent_dir(out_dir)) as tmp:
        troot = Path(tmp) / out_dir.name
        save_buffers(composed, troot)
        save_buffers(stack.background, troot / "layers" / "background")
        for i, buf in enumerate(stack.buildings):
            save_buffers(buf, troot / "layers" / f"building_{i + 1:04d}")
        for i, buf in enumerate(stack.vehicles):
            save_buffers(buf, troot / "layers" / f"vehicle_{i + 1:04d}")
        return _publish(Path(tmp), out_dir.parent)


def stage_compose(cfg: RunConfig) -> list[Path]:
    from .renderer import load_buffers
    from PIL import Image

    src = Path(cfg.out_dir)
    layers_dir = src / "layers"
    if not layers_dir.exists():
        raise DependencyError(f"{layers_dir} missing; run the render stage first")
    bg = load_buffers(layers_dir / "background")
    buildings = [load_buffers(p) for p in sorted(layers_dir.glob("building_*"))]
    vehicles = [load_buffers(p) for p in sorted(layers_dir.glob("vehicle_*"))]
    composed = compose(LayerStack(bg, buildings, vehicles))
    target = src / "composed.png"
    with tempfile.TemporaryDirectory(dir=_parent_dir(target)) as tmp:
        img = Image.fromarray((np.clip(composed.color, 0, 1) * 255).round().astype(np.uint8), "RGB")
        img.save(Path(tmp) / target.name)
        return _publish(Path(tmp), target.parent)


_STAGE_FN = {
    "ingest": stage_ingest,
    "hdmap": stage_hdmap,
    "simulate": stage_simulate,
    "render": stage_render,
    "compose": stage_compose,
}


def run_pipeline(
    cfg: RunConfig,
    stages: list[str] | None = None,
    force: bool = False,
    manifest_path: str | Path | None = None,
) -> dict:
    """Run the requested stages in dependency order and write the manifest."""
    ordered = [s for s in STAGES if s in (stages or STAGES)]
    unknown = set(stages or ()) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages: {sorted(unknown)}")
    manifest_path = Path(manifest_path) if manifest_path else Path(cfg.out_dir) / "manifest.json"
    previous: dict = {}
    if manifest_path.exists():
        try:
            previous = json.loads(manifest_path.read_text()).get("outputs", {})
        except json.JSONDecodeError:
            previous = {}
    outputs: dict[str, str] = {}
    ran: list[str] = []
    for stage in ordered:
        expected = _expected_outputs(cfg, stage)
        if (
            not force
            and expected
            and all(Path(p).exists() for p in expected)
            and all(previous.get(str(p)) == file_checksum(p) for p in expected)
        ):
            for p in expected:
                outputs[str(p)] = previous[str(p)]
            continue
        produced = _STAGE_FN[stage](cfg)
        for p in produced:
            outputs[str(p)] = file_checksum(p)
        ran.append(stage)
    return write_manifest(manifest_path, cfg, outputs, ran)


def _expected_outputs(cfg: RunConfig, stage: str) -> list[Path]:
    base = Path(cfg.layout)
    if stage == "ingest":
        return [base.with_name(base.name + suf) for suf in (".sem.png", ".hbu.png", ".htd.png")]
    if stage == "hdmap":
        return [Path(cfg.map)]
    if stage == "simulate":
        return [Path(cfg.scenario)]
    if stage == "render":
        return [Path(cfg.out_dir) / "color.png"]
    if stage == "compose":
        return [Path(cfg.out_dir) / "composed.png"]
    return []


# -- orbit -----------------------------------------------------------------------


def _orbit_worker(args) -> tuple[int, str]:
    (cfg_dict, frame_idx, cam_dict, out_dir) = args
    cfg = RunConfig.from_dict(cfg_dict)
    layout = _require_layout(cfg)
    frame_states = ()
    if cfg.vehicles > 0 and Path(cfg.scenario).exists():
        scenario = load_scenario(cfg.scenario)
        frame_states = scenario.frames[min(frame_idx, scenario.n_frames - 1)]
    camera = camera_from_dict(cam_dict)
    composed, _ = render_frame(layout, frame_states, camera, cfg)
    frame_dir = Path(out_dir) / f"frame_{frame_idx:04d}"
    save_buffers(composed, frame_dir)
    return frame_idx, str(frame_dir)


def run_orbit(
    cfg: RunConfig,
    center: tuple[float, float, float],
    radius: float,
    height: float,
    n_frames: int,
    out_dir: str | Path,
    camera_template: Camera,
) -> list[Path]:
    """Render an orbit sequence, one composited frame per camera position."""
    cams = orbit_cameras(center, radius, height, n_frames, camera_template)
    jobs = []
    for k, cam in enumerate(cams):
        cam_dict = {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "w": cam.width, "h": cam.height,
            "position": list(map(float, cam.position)),
            "look_at": list(map(float, center)),
        }
        jobs.append((asdict(cfg), k, cam_dict, str(out_dir)))
    results: list[tuple[int, str]] = []
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_orbit_worker, jobs))
    else:
        results = [_orbit_worker(j) for j in jobs]
    return [Path(p) for _, p in sorted(results)]
