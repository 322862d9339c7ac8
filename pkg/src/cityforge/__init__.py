"""cityforge: deterministic procedural 4D city pipeline.

Geodata -> BEV city layouts (semantic map + dual height fields) -> HD maps ->
kinematic traffic -> composited volumetric renders. Every stage is seeded and
reproducible bit for bit.
"""

from .semantics import SemanticClass
from .layout import (
    CityLayout,
    HeightFieldPair,
    InstanceMap,
    LocalWindow,
    SemanticMap,
    extract_local_window,
    instantiate_buildings,
    isolate_instance,
    load_layout,
    relabel_facade_roof,
    save_layout,
    tiled_extrapolate,
    volume_lookup,
)
from .mercator import MercatorGrid, ground_resolution, project_mercator, unproject_mercator
from .perlin import PerlinField, perlin_sample
from .ingest import GeoFeature, parse_features, rasterize
from .hdmap import HdMap, build_hdmap, load_hdmap, save_hdmap
from .traffic import (
    TrafficScenario,
    VehicleState,
    boxes_to_maps,
    canonicalize,
    rotation_matrix,
    simulate,
)
from .encoders import (
    FeatureTable,
    HashGridConfig,
    SceneFeature,
    building_point_feature,
    hash_feature,
    hash_index,
    scene_feature_global,
    sincos_encode,
    vehicle_point_feature,
)
from .camera import Camera
from .renderer import (
    RenderBuffers,
    ShadingConfig,
    dda_traverse,
    relight,
    render_background,
    render_building,
    render_vehicle,
    shadow_map,
)
from .compositor import LayerStack, compose

__version__ = "0.1.0"
