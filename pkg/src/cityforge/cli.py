"""cityforge command line: the pipeline stages as subcommands.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 data error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .camera import Camera, load_camera
from .encoders import FeatureTable, SceneFeature, hash_feature, sincos_encode
from .layout import load_instances, load_layout, save_layout, instantiate_buildings, save_instances
from .pipeline import ConfigError, DataError, DependencyError, RunConfig


def _parse_floats(text: str, n: int, name: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise ConfigError(f"--{name} needs {n} comma-separated values")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--{name}: {exc}") from exc


def _finish(cfg: RunConfig, stages: list[str], manifest: str | None, force: bool = False):
    manifest_written = pl.run_pipeline(cfg, stages=stages, force=force, manifest_path=manifest)
    if manifest:
        click.echo(f"manifest: {manifest}")
    return manifest_written


@click.group()
def cli():
    """Deterministic city pipeline: layouts, HD maps, traffic and renders."""


@cli.command()
@click.option("--features", required=True, help="newline-delimited JSON feature file")
@click.option("--bbox", required=True, help="lon0,lat0,lon1,lat1")
@click.option("--zoom", default=18, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out", required=True, help="output basename for the PNG triplet")
@click.option("--manifest", default=None, help="write a manifest JSON here")
def ingest(features, bbox, zoom, seed, out, manifest):
    """Rasterize geodata into the layout PNG triplet."""
    cfg = RunConfig(features=features, bbox=_parse_floats(bbox, 4, "bbox"), zoom=zoom, seed_layout=seed, layout=out)
    _finish(cfg, ["ingest"], manifest, force=True)


@cli.command("hdmap")
@click.option("--layout", required=True, help="layout basename (from ingest)")
@click.option("--out", required=True, help="HD-map JSON path")
@click.option("--manifest", default=None)
def hdmap_cmd(layout, out, manifest):
    """Derive the HD map (lanes, connectors, lines, signals) from a layout."""
    cfg = RunConfig(layout=layout, map=out)
    _finish(cfg, ["hdmap"], manifest, force=True)


@cli.command()
@click.option("--map", "map_path", required=True)
@click.option("--vehicles", default=8, show_default=True)
@click.option("--frames", default=30, show_default=True)
@click.option("--dt", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, help="scenario JSON path")
@click.option("--manifest", default=None)
def simulate(map_path, vehicles, frames, dt, seed, out, manifest):
    """Simulate traffic on the HD map."""
    cfg = RunConfig(map=map_path, vehicles=vehicles, frames=frames, dt=dt, seed_traffic=seed, scenario=out)
    _finish(cfg, ["simulate"], manifest, force=True)


@cli.command()
@click.option("--layout", required=True)
@click.option("--scenario", default=None, help="scenario JSON (omit for a static frame)")
@click.option("--camera", "camera_file", required=True, help="camera JSON")
@click.option("--frame", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True, help="style seed")
@click.option("--profile", default="googleearth", show_default=True)
@click.option("--window", default=None, help="override bg window, e.g. 512,512,192")
@click.option("--building-window", default=None, help="override building window")
@click.option("--relight", is_flag=True, default=False)
@click.option("--styles", default=None, help="per-instance style override JSON")
@click.option("--out", required=True, help="output directory")
@click.option("--manifest", default=None)
def render(layout, scenario, camera_file, frame, seed, profile, window, building_window, relight, styles, out, manifest):
    """Render one composited frame (plus per-layer buffers)."""
    cfg = RunConfig(
        layout=layout,
        scenario=scenario or "",
        vehicles=1 if scenario else 0,
        camera_file=camera_file,
        frame=frame,
        seed_style=seed,
        profile=profile,
        bg_window=_parse_floats(window, 3, "window") if window else None,
        building_window=_parse_floats(building_window, 3, "building-window") if building_window else None,
        relight=relight,
        styles=styles,
        out_dir=out,
    )
    if cfg.bg_window:
        cfg.bg_window = tuple(int(v) for v in cfg.bg_window)
    if cfg.building_window:
        cfg.building_window = tuple(int(v) for v in cfg.building_window)
    _finish(cfg, ["render"], manifest, force=True)


@cli.command()
@click.option("--in", "in_dir", required=True, help="render output dir with layers/")
@click.option("--out", default=None, help="composed PNG (default <in>/composed.png)")
@click.option("--manifest", default=None)
def compose(in_dir, out, manifest):
    """Merge saved per-layer renders into one image."""
    cfg = RunConfig(out_dir=in_dir)
    produced = pl.stage_compose(cfg)
    if out and Path(out) != produced[0]:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(produced[0].read_bytes())
    if manifest:
        pl.write_manifest(manifest, cfg, {str(p): pl.file_checksum(p) for p in produced}, ["compose"])


@cli.command()
@click.option("--layout", required=True)
@click.option("--scenario", default=None)
@click.option("--radius", default=120.0, show_default=True, help="orbit radius in cells")
@click.option("--height", default=90.0, show_default=True, help="camera height in cells")
@click.option("--frames", default=60, show_default=True)
@click.option("--center", default=None, help="orbit center x,y,z in cells (default layout center)")
@click.option("--camera", "camera_file", default=None, help="camera template JSON (intrinsics/size)")
@click.option("--profile", default="googleearth", show_default=True)
@click.option("--window", default=None, help="override bg window")
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True)
@click.option("--out", required=True)
@click.option("--manifest", default=None)
def orbit(layout, scenario, radius, height, frames, center, camera_file, profile, window, seed, threads, out, manifest):
    """Render an orbit sequence of composited frames."""
    cfg = RunConfig(
        layout=layout,
        scenario=scenario or "",
        vehicles=1 if scenario else 0,
        seed_style=seed,
        profile=profile,
        bg_window=tuple(int(v) for v in _parse_floats(window, 3, "window")) if window else None,
        threads=threads,
        out_dir=out,
    )
    lay = pl._require_layout(cfg)
    if center:
        c = _parse_floats(center, 3, "center")
    else:
        h, w = lay.shape
        c = (w / 2.0, h / 2.0, 0.0)
    template = load_camera(camera_file) if camera_file else Camera.look_at(
        position=(c[0] + radius, c[1], c[2] + height), target=c, fx=600.0, width=480, height=270
    )
    produced = pl.run_orbit(cfg, c, radius, height, frames, out, template)
    if manifest:
        outputs = {}
        for d in produced:
            for f in sorted(Path(d).glob("*.png")):
                outputs[str(f)] = pl.file_checksum(f)
        pl.write_manifest(manifest, cfg, outputs, ["orbit"])
    click.echo(f"orbit frames: {len(produced)}")


@cli.command()
@click.option("--probe", required=True, help="x,y,z probe point in window cells")
@click.option("--seed", default=0, show_default=True)
@click.option("--feature", default=None, help="scene feature values f1,f2 (default 0,0)")
def encode(probe, seed, feature):
    """Emit deterministic encoder outputs for a probe point as JSON."""
    p = _parse_floats(probe, 3, "probe")
    f_vals = _parse_floats(feature, 2, "feature") if feature else (0.0, 0.0)
    table = FeatureTable(seed)
    feat = hash_feature(p, SceneFeature(np.asarray(f_vals)), table)
    norm = np.clip(np.asarray(p) / max(np.abs(p).max(), 1.0), -1.0, 1.0)
    out = {
        "probe": list(p),
        "seed": seed,
        "scene_feature": list(f_vals),
        "hash_feature": [round(float(v), 12) for v in feat],
        "sincos": [round(float(v), 12) for v in sincos_encode(norm)],
    }
    click.echo(json.dumps(out, sort_keys=True))


@cli.group()
def edit():
    """Localized scene edits applied to artifacts, for batch re-renders."""


@edit.command("move-vehicle")
@click.option("--scenario", required=True)
@click.option("--id", "vid", required=True, type=int)
@click.option("--dx", default=0.0, show_default=True, help="cells")
@click.option("--dy", default=0.0, show_default=True, help="cells")
@click.option("--frame", default=-1, show_default=True, help="-1 edits every frame")
@click.option("--out", default=None, help="output scenario (default: in place)")
def move_vehicle(scenario, vid, dx, dy, frame, out):
    """Translate one vehicle's box center; the render stage picks it up."""
    data = json.loads(Path(scenario).read_text())
    hits = 0
    for fi, fr in enumerate(data["frames"]):
        if frame >= 0 and fi != frame:
            continue
        for v in fr:
            if v["id"] == vid:
                v["center"][0] += dx
                v["center"][1] += dy
                hits += 1
    if hits == 0:
        raise DataError(f"vehicle id {vid} not found")
    target = Path(out or scenario)
    pl.atomic_write_text(target, json.dumps(data, sort_keys=True) + "\n")
    click.echo(f"moved vehicle {vid} in {hits} frame(s)")


@edit.command("set-style")
@click.option("--styles", required=True, help="styles JSON sidecar (created if missing)")
@click.option("--kind", type=click.Choice(["building", "vehicle"]), required=True)
@click.option("--id", "iid", required=True, type=int)
@click.option("--seed", required=True, type=int)
def set_style(styles, kind, iid, seed):
    """Pin the style seed of one instance (consumed by render --styles)."""
    path = Path(styles)
    data = json.loads(path.read_text()) if path.exists() else {}
    data.setdefault(kind, {})[str(iid)] = seed
    pl.atomic_write_text(path, json.dumps(data, sort_keys=True, indent=1) + "\n")
    click.echo(f"{kind} {iid} -> style seed {seed}")


@edit.command("set-height")
@click.option("--layout", required=True)
@click.option("--instance", "iid", required=True, type=int)
@click.option("--height-cells", required=True, type=int)
@click.option("--out", default=None, help="output basename (default: in place)")
def set_height(layout, iid, height_cells, out):
    """Rewrite one building instance's top-down height."""
    lay = load_layout(layout)
    instances = instantiate_buildings(lay.semantic)
    sel = instances.labels == iid
    if not sel.any():
        raise DataError(f"building instance {iid} not found")
    from .layout import CityLayout, HeightFieldPair

    td = lay.heights.top_down.copy()
    bu = lay.heights.bottom_up.copy()
    td[sel] = np.maximum(bu[sel], height_cells)
    new = CityLayout(lay.semantic, HeightFieldPair(bu, td))
    save_layout(new, out or layout)
    click.echo(f"building {iid} top-down -> {height_cells} cells")


@cli.command()
@click.option("--config", "config_path", required=True, help="flat JSON config")
@click.option("--stages", default=None, help="comma-separated subset of stages")
@click.option("--force", is_flag=True, default=False)
@click.option("--manifest", default=None)
def run(config_path, stages, force, manifest):
    """Run the whole pipeline (or a stage subset) from a config file."""
    cfg = RunConfig.from_file(config_path)
    stage_list = stages.split(",") if stages else None
    out = pl.run_pipeline(cfg, stages=stage_list, force=force, manifest_path=manifest)
    click.echo(json.dumps({"stages": out["stages"], "outputs": len(out["outputs"])}))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except DependencyError as exc:
        click.echo(f"dependency error: {exc}", err=True)
        return 3
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 4
    except click.UsageError as exc:
        click.echo(f"config error: {exc.format_message()}", err=True)
        return 2
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except click.Abort:
        return 2


if __name__ == "__main__":
    sys.exit(main())
